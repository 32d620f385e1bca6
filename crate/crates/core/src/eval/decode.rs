use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::corpus::EOS;
use crate::delib::{check_lambda, interpolate, Branch, DecoderState, SecondPass, Sources};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rnnt::{rnnt_decode, FirstPassResult, Hypothesis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam1: usize,
    pub beam2: usize,
    pub top_k: usize,
    /// Candidate interpolation weights, searched on the dev set.
    pub lambda_grid: Vec<f64>,
    /// Hypotheses are forced to end after this many tokens.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam1: 2,
            beam2: 4,
            top_k: 1,
            lambda_grid: vec![0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0],
            max_len: 12,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam1 == 0 || self.beam2 == 0 || self.top_k == 0 {
            return Err(Error::Config("beam widths and top_k must be positive".into()));
        }
        if self.top_k > self.beam1 {
            return Err(Error::Config(format!(
                "top_k {} exceeds the first-pass beam {}",
                self.top_k, self.beam1
            )));
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda grid is empty".into()));
        }
        for &l in &self.lambda_grid {
            check_lambda(l)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPassOutput {
    pub first_pass: FirstPassResult,
    pub second_pass: Vec<Hypothesis>,
}

impl TwoPassOutput {
    /// Second-pass best, or the first-pass best for models without one.
    pub fn best(&self) -> &[usize] {
        self.second_pass
            .first()
            .or(self.first_pass.best())
            .map_or(&[], |h| &h.tokens)
    }
}

/// Scores next tokens under the combined distribution for one utterance.
struct Scorer<'a, 't> {
    tape: &'t Tape,
    store: &'a ParamStore,
    second: &'a SecondPass,
    sources: Sources<'t>,
    lambda: f64,
    use_lm: bool,
}

#[derive(Clone, Copy)]
struct States<'t> {
    acoustic: DecoderState<'t>,
    lm: Option<DecoderState<'t>>,
}

impl<'a, 't> Scorer<'a, 't> {
    fn new(
        tape: &'t Tape,
        model: &'a Model,
        enc: &Tensor,
        hyps: &[Hypothesis],
        top_k: usize,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        let second = &model.second;
        let enc = tape.constant(enc.clone());
        let h = if second.variant.attends_hypotheses() {
            Some(second.encode_hypotheses(tape, &model.store, hyps, top_k)?)
        } else {
            None
        };
        let sources = second.sources(tape, &model.store, enc, h.as_ref())?;
        Ok(Scorer {
            tape,
            store: &model.store,
            second,
            sources,
            lambda,
            use_lm: second.variant.is_jatd() && lambda < 1.0,
        })
    }

    fn initial(&self) -> States<'t> {
        let s = self.second.initial_state(self.tape);
        States {
            acoustic: s,
            lm: self.use_lm.then_some(s),
        }
    }

    fn next(&self, prev: usize, st: States<'t>) -> Result<(Vec<f64>, States<'t>)> {
        let (a, acoustic) = self
            .second
            .step(self.tape, self.store, &self.sources, prev, st.acoustic, Branch::Acoustic)?;
        let a = a.value();
        match st.lm {
            Some(l) => {
                let (b, lm) = self.second.step(self.tape, self.store, &self.sources, prev, l, Branch::Lm)?;
                let scores = interpolate(a.data(), b.value().data(), self.lambda)?;
                Ok((scores, States { acoustic, lm: Some(lm) }))
            }
            None => Ok((a.data().to_vec(), States { acoustic, lm: None })),
        }
    }
}

fn rank(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
}

struct Live<'t> {
    tokens: Vec<usize>,
    score: f64,
    states: States<'t>,
}

enum Cand {
    Finished,
    Extend(usize),
}

/// Label-synchronous beam search of fixed width. Every extension step
/// considers finishing (EOS) and each lexical token; after `max_len` tokens
/// only EOS remains.
fn beam_at_width(scorer: &Scorer<'_, '_>, width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    let vocab = scorer.second.config.vocab_size;
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        states: scorer.initial(),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut expanded = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, Vec<usize>, Cand)> = Vec::new();
        for h in &done {
            cands.push((h.score, h.tokens.clone(), Cand::Finished));
        }
        for p in &live {
            let prev = p.tokens.last().copied().unwrap_or(EOS);
            let (scores, next) = scorer.next(prev, p.states)?;
            cands.push((p.score + scores[EOS], p.tokens.clone(), Cand::Finished));
            if p.tokens.len() < max_len {
                for k in EOS + 1..vocab {
                    let mut t = p.tokens.clone();
                    t.push(k);
                    cands.push((p.score + scores[k], t, Cand::Extend(expanded.len())));
                }
            }
            expanded.push(next);
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| matches!(b.2, Cand::Finished).cmp(&matches!(a.2, Cand::Finished)))
                .then_with(|| a.1.cmp(&b.1))
        });
        let mut next_done = Vec::new();
        let mut next_live = Vec::new();
        for (score, tokens, c) in cands.into_iter().take(width) {
            match c {
                Cand::Finished => next_done.push(Hypothesis { tokens, score }),
                Cand::Extend(j) => next_live.push(Live {
                    tokens,
                    score,
                    states: expanded[j],
                }),
            }
        }
        done = next_done;
        live = next_live;
    }
    rank(&mut done);
    Ok(done)
}

/// Second-pass search. Results at widths `1..=width` are merged, so the
/// best score never drops as the width grows.
pub fn second_pass_beam(
    model: &Model,
    enc: &Tensor,
    hyps: &[Hypothesis],
    top_k: usize,
    lambda: f64,
    width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::invalid("second pass beam", "width must be positive"));
    }
    let tape = Tape::inference();
    let scorer = Scorer::new(&tape, model, enc, hyps, top_k, lambda)?;
    let mut merged: Vec<Hypothesis> = Vec::new();
    for w in 1..=width {
        for h in beam_at_width(&scorer, w, max_len)? {
            match merged.iter_mut().find(|m| m.tokens == h.tokens) {
                Some(m) => m.score = m.score.max(h.score),
                None => merged.push(h),
            }
        }
    }
    rank(&mut merged);
    merged.truncate(width);
    Ok(merged)
}

/// Best sequence over every token string of length `<= max_len`, found by
/// depth-first enumeration. Exponential; for tests on tiny vocabularies.
pub fn exhaustive_second_pass(
    model: &Model,
    enc: &Tensor,
    hyps: &[Hypothesis],
    top_k: usize,
    lambda: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    let tape = Tape::inference();
    let scorer = Scorer::new(&tape, model, enc, hyps, top_k, lambda)?;
    let vocab = model.second.config.vocab_size;
    let mut best = Hypothesis {
        tokens: Vec::new(),
        score: f64::NEG_INFINITY,
    };
    let mut prefix = Vec::new();
    fn walk<'t>(
        scorer: &Scorer<'_, 't>,
        vocab: usize,
        max_len: usize,
        prefix: &mut Vec<usize>,
        score: f64,
        states: States<'t>,
        best: &mut Hypothesis,
    ) -> Result<()> {
        let (scores, next) = scorer.next(prefix.last().copied().unwrap_or(EOS), states)?;
        let end = score + scores[EOS];
        if end > best.score || (end == best.score && *prefix < best.tokens) {
            *best = Hypothesis {
                tokens: prefix.clone(),
                score: end,
            };
        }
        if prefix.len() < max_len {
            for k in EOS + 1..vocab {
                prefix.push(k);
                walk(scorer, vocab, max_len, prefix, score + scores[k], next, best)?;
                prefix.pop();
            }
        }
        Ok(())
    }
    walk(&scorer, vocab, max_len, &mut prefix, 0.0, scorer.initial(), &mut best)?;
    Ok(best)
}

/// Combined score of a given token sequence, EOS included.
pub fn score_sequence(
    model: &Model,
    enc: &Tensor,
    hyps: &[Hypothesis],
    top_k: usize,
    lambda: f64,
    tokens: &[usize],
) -> Result<f64> {
    let tape = Tape::inference();
    let scorer = Scorer::new(&tape, model, enc, hyps, top_k, lambda)?;
    let mut st = scorer.initial();
    let mut prev = EOS;
    let mut total = 0.0;
    for &t in tokens.iter().chain(std::iter::once(&EOS)) {
        let (scores, next) = scorer.next(prev, st)?;
        total += scores[t];
        st = next;
        prev = t;
    }
    Ok(total)
}

/// Encoder, first-pass beam, then second-pass beam over the combined
/// scores.
pub fn two_pass_decode(model: &Model, features: &Tensor, cfg: &DecodeConfig, lambda: f64) -> Result<TwoPassOutput> {
    if features.rows() == 0 {
        return Err(Error::InvalidArgument {
            op: "two_pass_decode",
            msg: "features have no frames".into(),
        });
    }
    let tape = Tape::inference();
    let enc = model.first.encode(&tape, &model.store, features)?.value();
    drop(tape);
    let first_pass = rnnt_decode(&model.first, &model.store, &enc, cfg.beam1)?;
    let second_pass = second_pass_beam(
        model,
        &enc,
        &first_pass.hyps,
        cfg.top_k,
        lambda,
        cfg.beam2,
        cfg.max_len,
    )?;
    Ok(TwoPassOutput {
        first_pass,
        second_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delib::Variant;
    use crate::model::ModelConfig;
    use crate::rng;
    use rand::Rng as _;

    fn tiny(variant: Variant, seed: u64) -> Model {
        let mut cfg = ModelConfig {
            seed,
            variant,
            ..ModelConfig::default()
        };
        cfg.first_pass.vocab_size = 4;
        cfg.second_pass.vocab_size = 4;
        cfg.second_pass.hyp_len = 4;
        let mut m = Model::new(cfg).unwrap();
        // sharpen the fixed contexts so the LM branch matters
        let mut r = rng::stream(seed, 9);
        for id in m.second.fixed_e.into_iter().chain(m.second.fixed_b) {
            for v in m.store.get_mut(id).data_mut() {
                *v = r.random_range(-2.0..2.0);
            }
        }
        m
    }

    fn features(seed: u64, frames: usize) -> Tensor {
        let mut r = rng::stream(seed, 3);
        Tensor::new(vec![frames, 8], (0..frames * 8).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn wide_beam_matches_exhaustive() {
        for seed in 0..4 {
            let m = tiny(Variant::DelibJatdFull, seed);
            let x = features(seed, 4);
            let tape = Tape::inference();
            let enc = m.first.encode(&tape, &m.store, &x).unwrap().value();
            let hyps = rnnt_decode(&m.first, &m.store, &enc, 2).unwrap().hyps;
            let ex = exhaustive_second_pass(&m, &enc, &hyps, 1, 0.3, 3).unwrap();
            let beam = second_pass_beam(&m, &enc, &hyps, 1, 0.3, 64, 3).unwrap();
            assert_eq!(beam[0].tokens, ex.tokens);
            assert!((beam[0].score - ex.score).abs() < 1e-9);
            let rescored = score_sequence(&m, &enc, &hyps, 1, 0.3, &ex.tokens).unwrap();
            assert!((rescored - ex.score).abs() < 1e-9);
        }
    }

    #[test]
    fn best_score_monotone_in_width() {
        let m = tiny(Variant::DelibJatdPartial, 7);
        let x = features(7, 5);
        let tape = Tape::inference();
        let enc = m.first.encode(&tape, &m.store, &x).unwrap().value();
        let hyps = rnnt_decode(&m.first, &m.store, &enc, 2).unwrap().hyps;
        let mut last = f64::NEG_INFINITY;
        for w in 1..=6 {
            let s = second_pass_beam(&m, &enc, &hyps, 1, 0.5, w, 4).unwrap()[0].score;
            assert!(s >= last - 1e-12);
            last = s;
        }
    }

    #[test]
    fn outputs_have_no_blank_or_eos() {
        let m = tiny(Variant::Las, 2);
        let out = two_pass_decode(&m, &features(2, 6), &DecodeConfig::default(), 1.0).unwrap();
        for h in &out.second_pass {
            assert!(h.tokens.iter().all(|&t| t > EOS));
            assert!(h.tokens.len() <= 12);
        }
    }

    #[test]
    fn lambda_one_ignores_fixed_branch() {
        let m = tiny(Variant::DelibJatdFull, 3);
        let mut n = m.clone();
        for id in n.second.fixed_e.into_iter().chain(n.second.fixed_b) {
            n.store.get_mut(id).data_mut().fill(5.0);
        }
        let x = features(3, 4);
        let cfg = DecodeConfig::default();
        let a = two_pass_decode(&m, &x, &cfg, 1.0).unwrap();
        let b = two_pass_decode(&n, &x, &cfg, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = DecodeConfig {
            top_k: 3,
            ..DecodeConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DecodeConfig {
            lambda_grid: vec![1.5],
            ..DecodeConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
