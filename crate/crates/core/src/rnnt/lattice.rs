//! Transducer lattice: forward/backward log-probabilities over the
//! `T x (U+1)` grid and the negative log-likelihood with its exact gradient.
//!
//! Row `t * (U+1) + u` of the log-prob matrix is the output distribution
//! after consuming `t` frames' worth of position and emitting `u` labels.
//! Blank moves `t -> t+1`; label `y[u]` moves `u -> u+1`. Every complete
//! alignment ends with a blank out of `(T-1, U)`.

use crate::autodiff::tensor::log_add;
use crate::autodiff::{CustomOp, Tensor, Var};
use crate::corpus::BLANK;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Lattice {
    pub frames: usize,
    pub labels: Vec<usize>,
    /// `T x (U+1)`, row-major.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Lattice {
    /// Runs both recursions over `log_probs` (`T(U+1) x V`).
    pub fn compute(log_probs: &Tensor, frames: usize, labels: &[usize]) -> Result<Self> {
        let u1 = labels.len() + 1;
        if frames == 0 {
            return Err(Error::invalid("rnnt_loss", "no encoder frames"));
        }
        if log_probs.rows() != frames * u1 {
            return Err(Error::shape("rnnt_loss", &[frames * u1, log_probs.cols()], log_probs.shape()));
        }
        let v = log_probs.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y == BLANK || y >= v) {
            return Err(Error::invalid("rnnt_loss", format!("label {bad} is blank or outside the vocabulary")));
        }
        let lp = |t: usize, u: usize, k: usize| log_probs.at(t * u1 + u, k);

        let mut alpha = vec![f64::NEG_INFINITY; frames * u1];
        alpha[0] = 0.0;
        for t in 0..frames {
            for u in 0..u1 {
                if t == 0 && u == 0 {
                    continue;
                }
                let mut a = f64::NEG_INFINITY;
                if t > 0 {
                    a = alpha[(t - 1) * u1 + u] + lp(t - 1, u, BLANK);
                }
                if u > 0 {
                    a = log_add(a, alpha[t * u1 + u - 1] + lp(t, u - 1, labels[u - 1]));
                }
                alpha[t * u1 + u] = a;
            }
        }

        let mut beta = vec![f64::NEG_INFINITY; frames * u1];
        for t in (0..frames).rev() {
            for u in (0..u1).rev() {
                let b = if t == frames - 1 && u == u1 - 1 {
                    lp(t, u, BLANK)
                } else {
                    let mut b = f64::NEG_INFINITY;
                    if t + 1 < frames {
                        b = beta[(t + 1) * u1 + u] + lp(t, u, BLANK);
                    }
                    if u + 1 < u1 {
                        b = log_add(b, beta[t * u1 + u + 1] + lp(t, u, labels[u]));
                    }
                    b
                };
                beta[t * u1 + u] = b;
            }
        }
        Ok(Lattice {
            frames,
            labels: labels.to_vec(),
            alpha,
            beta,
        })
    }

    /// `log P(y | x)` from the forward variables.
    pub fn log_likelihood(&self) -> f64 {
        let u1 = self.labels.len() + 1;
        let last = self.frames * u1 - 1;
        // beta at the final node is the closing blank
        self.alpha[last] + self.beta[last]
    }

    /// `log P(y | x)` from the backward variables.
    pub fn log_likelihood_backward(&self) -> f64 {
        self.beta[0]
    }

    /// Gradient of `-log P(y | x)` with respect to every log-prob entry.
    pub fn nll_grad(&self, log_probs: &Tensor) -> Vec<f64> {
        let u1 = self.labels.len() + 1;
        let v = log_probs.cols();
        let total = self.log_likelihood_backward();
        let mut g = vec![0.0; log_probs.len()];
        for t in 0..self.frames {
            for u in 0..u1 {
                let row = t * u1 + u;
                let a = self.alpha[row];
                let blank_next = if t + 1 < self.frames {
                    self.beta[(t + 1) * u1 + u]
                } else if u == u1 - 1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                g[row * v + BLANK] = -(a + log_probs.at(row, BLANK) + blank_next - total).exp();
                if u + 1 < u1 {
                    let y = self.labels[u];
                    g[row * v + y] = -(a + log_probs.at(row, y) + self.beta[row + 1] - total).exp();
                }
            }
        }
        g
    }
}

struct RnntLossOp {
    lattice: Lattice,
}

impl CustomOp for RnntLossOp {
    fn name(&self) -> &'static str {
        "rnnt_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = self.lattice.nll_grad(inputs[0]);
        for x in &mut g {
            *x *= grad[0];
        }
        vec![Some(g)]
    }
}

/// `-log P(labels | x)` as a scalar on the tape, given normalized per-node
/// log-probs (`T(U+1) x V`).
pub fn rnnt_nll<'t>(log_probs: Var<'t>, frames: usize, labels: &[usize]) -> Result<Var<'t>> {
    let value = log_probs.value();
    let lattice = Lattice::compute(&value, frames, labels)?;
    let nll = -lattice.log_likelihood_backward();
    Ok(log_probs
        .tape()
        .custom(&[log_probs], Tensor::scalar(nll), Box::new(RnntLossOp { lattice })))
}

/// Every complete alignment as a sequence of `(t, u, emitted)` moves.
pub fn enumerate_alignments(frames: usize, num_labels: usize) -> Vec<Vec<(usize, usize, bool)>> {
    fn go(
        t: usize,
        u: usize,
        frames: usize,
        n: usize,
        path: &mut Vec<(usize, usize, bool)>,
        out: &mut Vec<Vec<(usize, usize, bool)>>,
    ) {
        if t == frames - 1 && u == n {
            path.push((t, u, false));
            out.push(path.clone());
            path.pop();
            return;
        }
        if t + 1 < frames {
            path.push((t, u, false));
            go(t + 1, u, frames, n, path, out);
            path.pop();
        }
        if u < n {
            path.push((t, u, true));
            go(t, u + 1, frames, n, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    if frames > 0 {
        go(0, 0, frames, num_labels, &mut Vec::new(), &mut out);
    }
    out
}

/// `-log` of the summed probability of all alignments, by enumeration.
pub fn brute_force_nll(log_probs: &Tensor, frames: usize, labels: &[usize]) -> f64 {
    let u1 = labels.len() + 1;
    let scores: Vec<f64> = enumerate_alignments(frames, labels.len())
        .iter()
        .map(|path| {
            path.iter()
                .map(|&(t, u, emit)| log_probs.at(t * u1 + u, if emit { labels[u] } else { BLANK }))
                .sum()
        })
        .collect();
    -crate::autodiff::tensor::log_sum_exp(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::log_softmax_rows;
    use crate::autodiff::Tape;
    use crate::rng;
    use rand::Rng as _;

    fn random_log_probs(rows: usize, v: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let logits = Tensor::matrix(rows, v, (0..rows * v).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        log_softmax_rows(&logits)
    }

    #[test]
    fn single_frame_no_labels_is_blank() {
        let lp = random_log_probs(1, 3, 1);
        let lat = Lattice::compute(&lp, 1, &[]).unwrap();
        assert!((lat.log_likelihood_backward() - lp.at(0, BLANK)).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_frames_one_label() {
        // two alignments, each of three moves: 2 * (1/2)^3
        let lp = Tensor::full(&[4, 2], 0.5f64.ln());
        let lat = Lattice::compute(&lp, 2, &[1]).unwrap();
        assert!((-lat.log_likelihood_backward() - -(2.0 * 0.125f64).ln()).abs() < 1e-14);
        assert_eq!(enumerate_alignments(2, 1).len(), 2);
    }

    #[test]
    fn alpha_beta_agree() {
        for seed in 0..20 {
            let (t, u) = (1 + seed as usize % 4, seed as usize % 4);
            let labels: Vec<usize> = (0..u).map(|i| 1 + (i + seed as usize) % 4).collect();
            let lp = random_log_probs(t * (u + 1), 5, seed);
            let lat = Lattice::compute(&lp, t, &labels).unwrap();
            assert!((lat.log_likelihood() - lat.log_likelihood_backward()).abs() < 1e-8);
            assert_eq!(lat.alpha[0], 0.0);
        }
    }

    #[test]
    fn matches_enumeration() {
        let lp = random_log_probs(3 * 3, 4, 9);
        let lat = Lattice::compute(&lp, 3, &[2, 3]).unwrap();
        assert!((-lat.log_likelihood_backward() - brute_force_nll(&lp, 3, &[2, 3])).abs() < 1e-12);
    }

    #[test]
    fn blank_label_is_rejected() {
        let lp = random_log_probs(4, 3, 2);
        assert!(Lattice::compute(&lp, 2, &[0]).is_err());
        assert!(Lattice::compute(&lp, 2, &[7]).is_err());
        assert!(Lattice::compute(&lp, 3, &[1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (t, labels) = (3, vec![1, 2]);
        let lp = random_log_probs(t * 3, 4, 5);
        let tape = Tape::new();
        let x = tape.leaf(lp.clone());
        let loss = rnnt_nll(x, t, &labels).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        let h = 1e-5;
        for i in 0..lp.len() {
            let mut p = lp.clone();
            p.data_mut()[i] += h;
            let mut m = lp.clone();
            m.data_mut()[i] -= h;
            let fd = (brute_force_nll(&p, t, &labels) - brute_force_nll(&m, t, &labels)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7, "entry {i}: {fd} vs {}", g.data()[i]);
        }
    }
}
