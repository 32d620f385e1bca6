use super::{interpolate_var, Branch, SecondPass};
use crate::autodiff::{concat, ExampleKind, ParamStore, Tape, Tensor, Var};
use crate::corpus::{Example, EOS};
use crate::error::{Error, Result};
use crate::rnnt::{FirstPass, Hypothesis};

/// A training or evaluation utterance with its first-pass n-best.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub kind: ExampleKind,
    pub features: Option<Tensor>,
    /// Encoder output computed ahead of time; used instead of `features`
    /// when present.
    pub encoded: Option<Tensor>,
    pub hyps: Vec<Hypothesis>,
    pub transcript: Vec<usize>,
}

impl Prepared {
    pub fn from_example(e: &Example, hyps: Vec<Hypothesis>) -> Self {
        Prepared {
            id: e.id.clone(),
            kind: e.kind,
            features: e.features.clone(),
            encoded: None,
            hyps,
            transcript: e.transcript.clone(),
        }
    }

    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, first: &FirstPass) -> Result<Var<'t>> {
        match (&self.encoded, &self.features) {
            (Some(enc), _) => Ok(tape.constant(enc.clone())),
            (None, Some(f)) => first.encode(tape, store, f),
            (None, None) => Err(Error::Model(format!("example {} has no features", self.id))),
        }
    }
}

pub struct LossBreakdown<'t> {
    /// Mean over examples of the per-token cross-entropy of the
    /// interpolated scores.
    pub loss: Var<'t>,
    /// Same averaging, acoustic branch alone.
    pub acoustic: f64,
    /// Same averaging, fixed-context branch alone (0 for variants without
    /// one).
    pub lm: f64,
    pub tokens: usize,
    pub truncated: usize,
}

/// Teacher-forced loss over `batch`. Targets are the transcript followed
/// by EOS; variants without a fixed-context branch ignore `lambda`.
pub fn second_pass_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    first: &FirstPass,
    second: &SecondPass,
    batch: &[&Prepared],
    lambda: f64,
    top_k: usize,
) -> Result<LossBreakdown<'t>> {
    if batch.is_empty() {
        return Err(Error::Model("empty batch".into()));
    }
    let jatd = second.variant.is_jatd();
    let mut per_example = Vec::with_capacity(batch.len());
    let (mut acoustic, mut lm, mut tokens, mut truncated) = (0.0, 0.0, 0, 0);
    for ex in batch {
        let enc = ex.encode(tape, store, first)?;
        let hyps = if second.variant.attends_hypotheses() {
            let h = second.encode_hypotheses(tape, store, &ex.hyps, top_k)?;
            truncated += h.truncated as usize;
            Some(h)
        } else {
            None
        };
        let sources = second.sources(tape, store, enc, hyps.as_ref())?;
        let mut inputs = vec![EOS];
        inputs.extend_from_slice(&ex.transcript);
        let mut targets = ex.transcript.clone();
        targets.push(EOS);
        let n = targets.len();

        let rollout = |branch: Branch| -> Result<Var<'t>> {
            let mut state = second.initial_state(tape);
            let mut rows = Vec::with_capacity(n);
            for &prev in &inputs {
                let (lp, next) = second.step(tape, store, &sources, prev, state, branch)?;
                rows.push(lp);
                state = next;
            }
            concat(&rows, 0)
        };
        let picks: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        let lp_a = rollout(Branch::Acoustic)?;
        let nll = |lp: &Var<'t>| {
            let v = lp.value();
            -picks.iter().map(|&(r, c)| v.at(r, c)).sum::<f64>() / n as f64
        };
        acoustic += nll(&lp_a);
        let combined = if jatd {
            let lp_l = rollout(Branch::Lm)?;
            lm += nll(&lp_l);
            interpolate_var(lp_a, lp_l, lambda)?
        } else {
            lp_a
        };
        per_example.push(combined.pick(&picks)?.scale(-1.0 / n as f64));
        tokens += n;
    }
    let b = batch.len() as f64;
    let loss = concat(&per_example, 1)?.sum().scale(1.0 / b);
    Ok(LossBreakdown {
        loss,
        acoustic: acoustic / b,
        lm: lm / b,
        tokens,
        truncated,
    })
}
