pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod delib;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod model;
pub mod rnnt;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
