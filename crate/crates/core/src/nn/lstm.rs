use super::Init;
use crate::autodiff::{concat, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// LSTM layer with an optional linear projection of the hidden output.
///
/// Gates are laid out `[input, forget, cell, output]` along the columns of
/// the fused weights. When a projection is present the projected output is
/// both the layer output and the recurrent input.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub projection_dim: Option<usize>,
    pub w_input: ParamId,
    pub w_recurrent: ParamId,
    pub bias: ParamId,
    pub w_projection: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl LstmLayer {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        projection_dim: Option<usize>,
    ) -> Self {
        let out = projection_dim.unwrap_or(hidden_dim);
        LstmLayer {
            input_dim,
            hidden_dim,
            projection_dim,
            w_input: init.glorot(&format!("{name}.w_input"), input_dim, 4 * hidden_dim),
            w_recurrent: init.glorot(&format!("{name}.w_recurrent"), out, 4 * hidden_dim),
            bias: init.uniform(&format!("{name}.bias"), &[1, 4 * hidden_dim]),
            w_projection: projection_dim
                .map(|p| init.glorot(&format!("{name}.w_projection"), hidden_dim, p)),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.hidden_dim)
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape) -> LstmState<'t> {
        LstmState {
            h: tape.constant(Tensor::zeros(&[1, self.output_dim()])),
            c: tape.constant(Tensor::zeros(&[1, self.hidden_dim])),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape("lstm", &[self.input_dim], shape));
        }
        Ok(())
    }

    /// One cell update from an already projected input row (`1 x 4H`).
    fn cell<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_gates: Var<'t>,
        state: LstmState<'t>,
    ) -> Result<LstmState<'t>> {
        let h = self.hidden_dim;
        let z = x_gates
            .add(state.h.matmul(tape.param(store, self.w_recurrent))?)?
            .add(tape.param(store, self.bias))?;
        let i_f = z.slice(1, 0, 2 * h)?.sigmoid();
        let i = i_f.slice(1, 0, h)?;
        let f = i_f.slice(1, h, h)?;
        let g = z.slice(1, 2 * h, h)?.tanh();
        let o = z.slice(1, 3 * h, h)?.sigmoid();
        let c = f.mul(state.c)?.add(i.mul(g)?)?;
        let mut out = o.mul(c.tanh())?;
        if let Some(p) = self.w_projection {
            out = out.matmul(tape.param(store, p))?;
        }
        Ok(LstmState { h: out, c })
    }

    /// Single step on a `1 x D` input.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        state: LstmState<'t>,
    ) -> Result<LstmState<'t>> {
        self.check_input(&x.shape())?;
        let xg = x.matmul(tape.param(store, self.w_input))?;
        self.cell(tape, store, xg, state)
    }

    /// Runs over a `T x D` sequence, returning `T x P` outputs and the final
    /// state.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        seq: Var<'t>,
        init: Option<LstmState<'t>>,
    ) -> Result<(Var<'t>, LstmState<'t>)> {
        let shape = seq.shape();
        self.check_input(&shape)?;
        if shape[0] == 0 {
            return Err(Error::invalid("lstm", "empty sequence"));
        }
        let xg = seq.matmul(tape.param(store, self.w_input))?;
        let mut state = init.unwrap_or_else(|| self.zero_state(tape));
        let mut outs = Vec::with_capacity(shape[0]);
        for t in 0..shape[0] {
            state = self.cell(tape, store, xg.slice(0, t, 1)?, state)?;
            outs.push(state.h);
        }
        Ok((concat(&outs, 0)?, state))
    }
}

/// Forward layer over the sequence, backward layer over the reversed
/// sequence (re-reversed), joined along columns: `T x (P_fwd + P_bwd)`.
pub fn bilstm_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    fwd: &LstmLayer,
    bwd: &LstmLayer,
    seq: Var<'t>,
) -> Result<Var<'t>> {
    if fwd.input_dim != bwd.input_dim {
        return Err(Error::shape("bilstm", &[fwd.input_dim], &[bwd.input_dim]));
    }
    let t = seq.shape()[0];
    let rev: Vec<usize> = (0..t).rev().collect();
    let (out_f, _) = fwd.forward(tape, store, seq, None)?;
    let (out_b, _) = bwd.forward(tape, store, seq.gather_rows(&rev)?, None)?;
    concat(&[out_f, out_b.gather_rows(&rev)?], 1)
}
