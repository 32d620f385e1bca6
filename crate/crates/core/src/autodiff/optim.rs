use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{GradMask, GradStore, ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr },
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            },
        }
    }
}

/// Optimizer state. Moments and step counts are kept per parameter so a
/// frozen parameter's state does not advance.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Multiplier on the configured learning rate, set by a schedule.
    pub lr_scale: f64,
    first: GradStore,
    second: GradStore,
    steps: Vec<Vec<u64>>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, config: OptimizerConfig, clip_norm: Option<f64>) -> Self {
        Optimizer {
            config,
            clip_norm,
            lr_scale: 1.0,
            first: GradStore::zeros_like(store),
            second: GradStore::zeros_like(store),
            steps: store.groups().iter().map(|g| vec![0; g.params.len()]).collect(),
        }
    }

    pub fn sgd(store: &ParamStore, lr: f64) -> Self {
        Optimizer::new(store, OptimizerConfig::Sgd { lr }, None)
    }

    /// Moments and step counters serialized as parameter-group records.
    pub fn state_groups(&self, store: &ParamStore) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        for (gi, g) in store.groups().iter().enumerate() {
            let ids = (0..g.params.len()).map(|index| ParamId { group: gi, index });
            let m: Vec<_> = ids.clone().map(|id| Arc::new(self.first.get(id).clone())).collect();
            let v: Vec<_> = ids.map(|id| Arc::new(self.second.get(id).clone())).collect();
            let steps = Tensor::new(
                vec![g.params.len()],
                self.steps[gi].iter().map(|&s| s as f64).collect(),
            )
            .expect("steps shape");
            let mut tensors = m;
            tensors.extend(v);
            tensors.push(Arc::new(steps));
            out.push(ParamGroup {
                name: format!("optim/{}", g.name),
                gate: g.gate,
                names: Vec::new(),
                params: tensors,
            });
        }
        out
    }

    pub fn load_state_groups(&mut self, store: &ParamStore, groups: &[ParamGroup]) -> Result<()> {
        if groups.len() != store.groups().len() {
            return Err(Error::Format("optimizer state group count mismatch".into()));
        }
        for (gi, (g, state)) in store.groups().iter().zip(groups).enumerate() {
            let n = g.params.len();
            if state.params.len() != 2 * n + 1 {
                return Err(Error::Format(format!("optimizer state for {} malformed", g.name)));
            }
            for index in 0..n {
                let id = ParamId { group: gi, index };
                let (m, v) = (&state.params[index], &state.params[n + index]);
                if m.shape() != g.params[index].shape() || v.shape() != g.params[index].shape() {
                    return Err(Error::shape("optimizer state", g.params[index].shape(), m.shape()));
                }
                *self.first.get_mut(id) = (**m).clone();
                *self.second.get_mut(id) = (**v).clone();
            }
            self.steps[gi] = state.params[2 * n].data().iter().map(|&s| s as u64).collect();
        }
        Ok(())
    }
}

/// Updates every parameter whose gate is not frozen by `mask`. Frozen
/// parameters, and their optimizer state, are left bitwise untouched.
pub fn apply_update(
    store: &mut ParamStore,
    grads: &GradStore,
    mask: &GradMask,
    opt: &mut Optimizer,
) -> Result<()> {
    if grads.num_groups() != store.groups().len()
        || (0..grads.num_groups()).any(|g| grads.group_len(g) != store.groups()[g].params.len())
    {
        return Err(Error::invalid("apply_update", "gradient layout does not match parameters"));
    }
    let active: Vec<ParamId> = store
        .ids()
        .filter(|&id| !mask.is_frozen(store.gate_of(id)))
        .collect();
    for &id in &active {
        if grads.get(id).shape() != store.get(id).shape() {
            return Err(Error::shape("apply_update", store.get(id).shape(), grads.get(id).shape()));
        }
    }

    let mut factor = 1.0;
    if let Some(clip) = opt.clip_norm {
        let norm = active.iter().map(|&id| grads.get(id).sq_norm()).sum::<f64>().sqrt();
        if norm > clip {
            factor = clip / norm;
        }
    }

    let scale = opt.lr_scale;
    for id in active {
        let g = grads.get(id).data();
        match opt.config {
            OptimizerConfig::Sgd { lr } => {
                let p = store.get_mut(id).data_mut();
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= scale * lr * factor * gv;
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let step = &mut opt.steps[id.group][id.index];
                *step += 1;
                let t = *step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let m = opt.first.get_mut(id).data_mut();
                let v = opt.second.get_mut(id).data_mut();
                let p = store.get_mut(id).data_mut();
                for i in 0..p.len() {
                    let gi = g[i] * factor;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    p[i] -= scale * lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::{ExampleKind, Gate};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let enc = s.add_group("enc", Gate::EncoderStack);
        let ctx = s.add_group("ctx", Gate::FixedContextE);
        s.add(enc, "w", Tensor::row(vec![1.0, -2.0]));
        s.add(ctx, "c", Tensor::row(vec![0.5]));
        s
    }

    fn ones(s: &ParamStore) -> GradStore {
        let mut g = GradStore::zeros_like(s);
        for id in s.ids() {
            g.get_mut(id).data_mut().fill(1.0);
        }
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters_with_sgd() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Optimizer::sgd(&s, 0.1);
        let g = GradStore::zeros_like(&s);
        apply_update(&mut s, &g, &GradMask::open(ExampleKind::Paired), &mut opt).unwrap();
        for id in s.ids() {
            assert!(s.get(id).bit_eq(before.get(id)));
        }
    }

    #[test]
    fn frozen_gate_is_bitwise_unchanged() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Optimizer::new(&s, OptimizerConfig::default(), Some(5.0));
        let g = ones(&s);
        apply_update(&mut s, &g, &GradMask::joint(ExampleKind::Unpaired), &mut opt).unwrap();
        assert!(s.snapshot(Gate::EncoderStack)[0].bit_eq(&before.snapshot(Gate::EncoderStack)[0]));
        assert!(!s.snapshot(Gate::FixedContextE)[0].bit_eq(&before.snapshot(Gate::FixedContextE)[0]));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = store();
        let mut opt = Optimizer::new(&s, OptimizerConfig::default(), None);
        let g = ones(&s);
        apply_update(&mut s, &g, &GradMask::open(ExampleKind::Paired), &mut opt).unwrap();
        let w = s.snapshot(Gate::EncoderStack)[0].clone();
        assert!((w.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut s = store();
        let mut opt = Optimizer::new(&s, OptimizerConfig::Sgd { lr: 1.0 }, Some(1.0));
        let mut g = GradStore::zeros_like(&s);
        for id in s.ids() {
            g.get_mut(id).data_mut().fill(10.0);
        }
        let before = s.clone();
        apply_update(&mut s, &g, &GradMask::open(ExampleKind::Paired), &mut opt).unwrap();
        let moved: f64 = s
            .ids()
            .map(|id| s.get(id).max_abs_diff(before.get(id)).powi(2) * s.get(id).len() as f64)
            .sum::<f64>()
            .sqrt();
        assert!((moved - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_gradient_layout_is_an_error() {
        let mut s = store();
        let mut other = ParamStore::new();
        let g = other.add_group("x", Gate::FirstPass);
        other.add(g, "x", Tensor::scalar(0.0));
        let grads = GradStore::zeros_like(&other);
        let mut opt = Optimizer::sgd(&s, 0.1);
        assert!(apply_update(&mut s, &grads, &GradMask::open(ExampleKind::Paired), &mut opt).is_err());
    }
}
