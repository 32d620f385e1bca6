//! Layers built on the tape: affine maps, embeddings, LSTMs with output
//! projection, multi-head attention and frame-stacking time reduction.

mod attention;
mod lstm;

pub use attention::{AttentionMemory, MultiHeadAttention};
pub use lstm::{bilstm_forward, LstmLayer, LstmState};

use rand::Rng as _;

use crate::autodiff::{concat, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Half-width of the uniform initializer.
pub const INIT_SCALE: f64 = 0.1;

/// Creates parameters in one group with a seeded uniform initializer.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub group: usize,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-INIT_SCALE..INIT_SCALE))
            .collect();
        self.store
            .add(self.group, name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Uniform in `±sqrt(6 / (rows + cols))` for a weight matrix.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.store
            .add(self.group, name, Tensor::new(vec![rows, cols], data).expect("shape"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(self.group, name, Tensor::zeros(shape))
    }
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = init.glorot(&format!("{name}.w"), in_dim, out_dim);
        let bias = bias.then(|| init.uniform(&format!("{name}.b"), &[1, out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(tape.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(init: &mut Init<'_>, name: &str, vocab: usize, dim: usize) -> Self {
        Embedding {
            table: init.glorot(name, vocab, dim),
            vocab,
            dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Result<Var<'t>> {
        tape.param(store, self.table).gather_rows(ids)
    }
}

/// Stacks each group of `factor` adjacent frames into one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeReduction {
    pub factor: usize,
}

impl Default for TimeReduction {
    fn default() -> Self {
        TimeReduction { factor: 2 }
    }
}

impl TimeReduction {
    pub fn output_len(&self, t: usize) -> usize {
        t.div_ceil(self.factor)
    }

    /// `T x D` to `ceil(T/factor) x (factor*D)`; a trailing partial group is
    /// padded with zero frames.
    pub fn apply<'t>(&self, seq: Var<'t>) -> Result<Var<'t>> {
        if self.factor == 0 {
            return Err(Error::invalid("time_reduce", "factor must be positive"));
        }
        let shape = seq.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::invalid("time_reduce", format!("expects a non-empty T x D sequence, got {shape:?}")));
        }
        let (t, d) = (shape[0], shape[1]);
        let out_len = self.output_len(t);
        let pad = out_len * self.factor - t;
        let padded = if pad > 0 {
            let zeros = seq.tape().constant(Tensor::zeros(&[pad, d]));
            concat(&[seq, zeros], 0)?
        } else {
            seq
        };
        padded.reshape(&[out_len, self.factor * d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_reduction_lengths() {
        let tr = TimeReduction::default();
        let tape = Tape::new();
        for (t, expect) in [(4, 2), (5, 3), (1, 1)] {
            let x = tape.constant(Tensor::full(&[t, 3], 1.0));
            let y = tr.apply(x).unwrap();
            assert_eq!(y.shape(), vec![expect, 6]);
        }
    }

    #[test]
    fn odd_length_pads_right_half_of_last_frame() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..10).map(|v| v as f64 + 1.0).collect();
        let x = tape.constant(Tensor::matrix(5, 2, data).unwrap());
        let y = TimeReduction::default().apply(x).unwrap().value();
        assert_eq!(y.row_slice(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.row_slice(2), &[9.0, 10.0, 0.0, 0.0]);
    }
}
