//! Reverse-mode differentiation, parameter groups with gradient gating,
//! optimizers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{apply_update, Optimizer, OptimizerConfig};
pub use params::{ExampleKind, Gate, GradMask, GradStore, ParamGroup, ParamId, ParamStore};
pub use tape::{concat, forward_op, CustomOp, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
