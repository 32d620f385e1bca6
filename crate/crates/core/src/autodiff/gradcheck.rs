//! Central finite-difference checks of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and numerical derivatives, scalar by scalar.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        (self.checked - self.failures) as f64 / self.checked as f64
    }

    fn record(&mut self, analytic: f64, numeric: f64, tol: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > tol {
            self.failures += 1;
        }
        self.max_rel_err = self.max_rel_err.max(err);
    }
}

/// `|a - n| / max(|a|, |n|)`, with a floor of 1e-7 on the denominator so
/// derivatives that are zero up to round-off compare as equal.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-7);
    (a - n).abs() / denom
}

/// Checks gradients with respect to freshly created leaf inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            report.record(analytic[i].data()[j], (up - down) / (2.0 * h), tol);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every scalar of every parameter in
/// `store`. The store is restored before returning.
pub fn check_params<F>(store: &mut ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let analytic = tape.backward(loss)?.params(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        Ok(f(&tape, s)?.value().item())
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            report.record(analytic.get(id).data()[j], (up - down) / (2.0 * h), tol);
        }
    }
    Ok(report)
}
