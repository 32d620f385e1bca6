//! Self-contained property suites with fixed seeds, run by `djtd verify`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{gradcheck, ExampleKind, Gate, Optimizer, ParamStore, Tape, Tensor};
use crate::corpus::EOS;
use crate::delib::{interpolate, second_pass_loss, Prepared, Variant};
use crate::error::{Error, Result};
use crate::eval::{score_sequence, second_pass_beam, two_pass_decode, DecodeConfig};
use crate::model::{Model, ModelConfig};
use crate::rng::{self, Rng};
use crate::rnnt::{brute_force_nll, rnnt_decode, Lattice};
use crate::train::{train_step, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradcheck,
    RnntOracle,
    Gating,
    Interp,
    BeamOracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Gradcheck,
        Suite::RnntOracle,
        Suite::Gating,
        Suite::Interp,
        Suite::BeamOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::RnntOracle => "rnnt-oracle",
            Suite::Gating => "gating",
            Suite::Interp => "interp",
            Suite::BeamOracle => "beam-oracle",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: Suite) -> Self {
        SuiteReport {
            suite: suite.name().into(),
            ..SuiteReport::default()
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(seed),
        Suite::RnntOracle => rnnt_oracle_suite(seed, 200),
        Suite::Gating => gating_suite(seed),
        Suite::Interp => interp_suite(seed),
        Suite::BeamOracle => beam_oracle_suite(seed, 50),
    }
}

/// Small dimensions (all at most 16) for exhaustive and numerical checks.
pub fn tiny_config(variant: Variant, seed: u64, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig {
        seed,
        variant,
        ..ModelConfig::default()
    };
    let f = &mut c.first_pass;
    f.feature_dim = 4;
    f.vocab_size = vocab;
    f.encoder_hidden = 8;
    f.encoder_projection = 6;
    f.embed_dim = 4;
    f.pred_hidden = 8;
    f.pred_projection = 6;
    f.joint_dim = 6;
    let s = &mut c.second_pass;
    s.vocab_size = vocab;
    s.encoder_dim = 6;
    s.hyp_len = 4;
    s.hyp_embed_dim = 4;
    s.hyp_hidden = 6;
    s.hyp_projection = 4;
    s.attention_dim = 6;
    s.embed_dim = 4;
    s.decoder_hidden = 8;
    s.decoder_projection = 6;
    c
}

pub fn random_features(r: &mut Rng, frames: usize, dim: usize) -> Tensor {
    let data = (0..frames * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![frames, dim], data).expect("shape matches data")
}

/// Random values for every fixed context, so the text-only branch differs
/// from its zero initialization.
pub fn randomize_fixed_contexts(model: &mut Model, r: &mut Rng) {
    for id in model.second.fixed_e.into_iter().chain(model.second.fixed_b) {
        for v in model.store.get_mut(id).data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
}

fn random_tokens(r: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(EOS + 1..vocab)).collect()
}

fn random_example(model: &Model, r: &mut Rng, kind: ExampleKind, frames: usize, len: usize) -> Result<Prepared> {
    let v = model.config.first_pass.vocab_size;
    let features = random_features(r, frames, model.config.first_pass.feature_dim);
    let tape = Tape::inference();
    let enc = model.first.encode(&tape, &model.store, &features)?.value();
    let hyps = rnnt_decode(&model.first, &model.store, &enc, 2)?.hyps;
    let hyps = if hyps.is_empty() {
        vec![crate::rnnt::Hypothesis {
            tokens: random_tokens(r, len, v),
            score: 0.0,
        }]
    } else {
        hyps
    };
    Ok(Prepared {
        id: "verify".into(),
        kind,
        features: Some(features),
        encoded: None,
        hyps,
        transcript: random_tokens(r, len, v),
    })
}

/// Variants whose loss the whole-model gradient check covers.
pub const GRADCHECK_VARIANTS: [Variant; 4] = [
    Variant::Deliberation,
    Variant::DelibJatdPartial,
    Variant::DelibJatdFull,
    Variant::LasJatd,
];

/// Central differences over every parameter scalar of a tiny model on a
/// one-example batch; returns the checked count and pass fraction.
pub fn whole_model_gradcheck(variant: Variant, seed: u64) -> Result<gradcheck::GradCheckReport> {
    let mut r = rng::stream(seed, 0x6C);
    let mut model = Model::new(tiny_config(variant, seed, 6))?;
    randomize_fixed_contexts(&mut model, &mut r);
    let frames = r.random_range(4..=6);
    let len = r.random_range(1..=3);
    let ex = random_example(&model, &mut r, ExampleKind::Paired, frames, len)?;
    let (first, second) = (model.first.clone(), model.second.clone());
    gradcheck::check_params(
        &mut model.store,
        |tape, store| Ok(second_pass_loss(tape, store, &first, &second, &[&ex], 0.3, 1)?.loss),
        gradcheck::DEFAULT_STEP,
        1e-4,
    )
}

fn gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Gradcheck);
    for v in GRADCHECK_VARIANTS {
        let g = whole_model_gradcheck(v, seed)?;
        rep.check(g.pass_fraction() >= 0.99, || {
            format!("{v}: {} of {} scalars outside 1e-4", g.failures, g.checked)
        });
    }
    Ok(rep)
}

/// Random normalized `[T(U+1) x V]` log-probabilities and labels.
pub fn random_lattice_instance(r: &mut Rng) -> (Tensor, usize, Vec<usize>) {
    let t = r.random_range(1..=4);
    let u = r.random_range(0..=3);
    let v = r.random_range(2..=5);
    let labels: Vec<usize> = (0..u).map(|_| r.random_range(1..v)).collect();
    let rows = t * (u + 1);
    let mut data = Vec::with_capacity(rows * v);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..v).map(|_| r.random_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|x| x - lse));
    }
    (Tensor::new(vec![rows, v], data).expect("shape matches data"), t, labels)
}

fn rnnt_oracle_suite(seed: u64, n: usize) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::RnntOracle);
    let mut r = rng::stream(seed, 0x0A);
    for i in 0..n {
        let (lp, t, labels) = random_lattice_instance(&mut r);
        let nll = -Lattice::compute(&lp, t, &labels)?.log_likelihood();
        let oracle = brute_force_nll(&lp, t, &labels);
        rep.check((nll - oracle).abs() <= 1e-6, || {
            format!("instance {i}: lattice {nll} vs enumeration {oracle}")
        });
    }
    Ok(rep)
}

fn same_gate(a: &ParamStore, b: &ParamStore, gate: Gate) -> bool {
    a.snapshot(gate).iter().zip(&b.snapshot(gate)).all(|(x, y)| x.bit_eq(y))
}

/// One step on an all-unpaired and one on an all-paired batch; returns the
/// stores before and after each.
pub fn gating_steps(variant: Variant, seed: u64) -> Result<[(ParamStore, ParamStore); 2]> {
    let mut r = rng::stream(seed, 0x6A);
    let mut model = Model::new(tiny_config(variant, seed, 6))?;
    randomize_fixed_contexts(&mut model, &mut r);
    let cfg = TrainConfig {
        freeze_first_pass: false,
        ..TrainConfig::default()
    };
    let mut out = Vec::new();
    for kind in [ExampleKind::Unpaired, ExampleKind::Paired] {
        let batch: Vec<Prepared> = (0..3)
            .map(|_| random_example(&model, &mut r, kind, 6, 3))
            .collect::<Result<_>>()?;
        let refs: Vec<&Prepared> = batch.iter().collect();
        let mut opt = Optimizer::new(&model.store, cfg.optimizer, Some(cfg.clip_norm));
        let before = model.store.clone();
        train_step(&mut model, &mut opt, &refs, &cfg)?;
        out.push((before, model.store.clone()));
    }
    let paired = out.pop().expect("two steps");
    let unpaired = out.pop().expect("two steps");
    Ok([unpaired, paired])
}

fn gating_suite(seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Gating);
    for v in [Variant::DelibJatdFull, Variant::DelibJatdPartial, Variant::LasJatd] {
        let [(u0, u1), (p0, p1)] = gating_steps(v, seed)?;
        for g in [Gate::EncoderStack, Gate::EncoderAttention] {
            rep.check(same_gate(&u0, &u1, g), || format!("{v}: unpaired step moved {g}"));
        }
        for g in [Gate::FixedContextE, Gate::FixedContextB] {
            rep.check(same_gate(&p0, &p1, g), || format!("{v}: paired step moved {g}"));
        }
        rep.check(!same_gate(&u0, &u1, Gate::SecondPassDecoder), || {
            format!("{v}: unpaired step left the decoder unchanged")
        });
        rep.check(!same_gate(&p0, &p1, Gate::SecondPassDecoder), || {
            format!("{v}: paired step left the decoder unchanged")
        });
    }
    Ok(rep)
}

/// Full and plain deliberation models sharing every weight but the fixed
/// contexts, which are randomized in the former.
pub fn shared_weight_pair(seed: u64, vocab: usize) -> Result<(Model, Model)> {
    let mut full = Model::new(tiny_config(Variant::DelibJatdFull, seed, vocab))?;
    let plain = Model::new(tiny_config(Variant::Deliberation, seed, vocab))?;
    randomize_fixed_contexts(&mut full, &mut rng::stream(seed, 0xFC));
    Ok((full, plain))
}

/// Text-only branch outputs of one model for several random inputs (audio
/// and first-pass hypothesis), same token history.
pub fn lm_branch_outputs(model: &Model, seed: u64, inputs: usize) -> Result<Vec<Tensor>> {
    let mut r = rng::stream(seed, 0x1D);
    let v = model.config.second_pass.vocab_size;
    let prev = random_tokens(&mut r, 3, v);
    (0..inputs)
        .map(|_| {
            let mut ex = random_example(model, &mut r, ExampleKind::Paired, 6, 2)?;
            let len = r.random_range(1..=3);
            ex.hyps = vec![crate::rnnt::Hypothesis {
                tokens: random_tokens(&mut r, len, v),
                score: 0.0,
            }];
            let tape = Tape::inference();
            let enc = ex.encode(&tape, &model.store, &model.first)?;
            let h = model.second.encode_hypotheses(&tape, &model.store, &ex.hyps, 1)?;
            let src = model.second.sources(&tape, &model.store, enc, Some(&h))?;
            let mut st = model.second.initial_state(&tape);
            let mut out = None;
            for &p in &prev {
                let (lp, next) = model.second.step_lm(&tape, &model.store, &src, p, st)?;
                st = next;
                out = Some(lp.value());
            }
            Ok((*out.expect("non-empty history")).clone())
        })
        .collect()
}

fn interp_suite(seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Interp);
    let mut r = rng::stream(seed, 0x17);
    for _ in 0..20 {
        let a: Vec<f64> = (0..8).map(|_| r.random_range(-10.0..0.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| r.random_range(-10.0..0.0)).collect();
        rep.check(interpolate(&a, &b, 1.0)? == a, || "lambda 1 is not the acoustic branch".into());
        rep.check(interpolate(&a, &b, 0.0)? == b, || "lambda 0 is not the text branch".into());
        let l: f64 = r.random();
        let c = interpolate(&a, &b, l)?;
        let ok = c
            .iter()
            .zip(a.iter().zip(&b))
            .all(|(c, (a, b))| (c - (l * a + (1.0 - l) * b)).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()));
        rep.check(ok, || format!("lambda {l}: combination is not linear"));
    }
    let (full, plain) = shared_weight_pair(seed, 8)?;
    let cfg = DecodeConfig::default();
    for i in 0..5 {
        let x = random_features(&mut r, 6, 4);
        let a = two_pass_decode(&full, &x, &cfg, 1.0)?;
        let b = two_pass_decode(&plain, &x, &cfg, 1.0)?;
        rep.check(a == b, || format!("input {i}: full variant at lambda 1 differs from deliberation"));
    }
    let outs = lm_branch_outputs(&full, seed, 10)?;
    rep.check(outs.iter().all(|o| o.bit_eq(&outs[0])), || {
        "full variant text branch depends on the audio".into()
    });
    let mut partial = Model::new(tiny_config(Variant::DelibJatdPartial, seed, 8))?;
    randomize_fixed_contexts(&mut partial, &mut r);
    let outs = lm_branch_outputs(&partial, seed, 10)?;
    rep.check(outs.iter().any(|o| !o.bit_eq(&outs[0])), || {
        "partial variant text branch ignores the audio".into()
    });
    Ok(rep)
}

/// Every token string of length at most `max_len` over the lexical ids.
pub fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for k in EOS + 1..vocab {
                let mut s: Vec<usize> = p.clone();
                s.push(k);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Compares the widest second-pass beam against scoring every sequence
/// separately, on one random V=4 model; returns `(beam, oracle)` as
/// `(tokens, score)` pairs.
pub fn beam_vs_brute_force(seed: u64, lambda: f64) -> Result<((Vec<usize>, f64), (Vec<usize>, f64))> {
    const VOCAB: usize = 4;
    const MAX_LEN: usize = 3;
    let mut r = rng::stream(seed, 0xBE);
    let variant = Variant::ALL[r.random_range(0..Variant::ALL.len())];
    let mut model = Model::new(tiny_config(variant, seed, VOCAB))?;
    randomize_fixed_contexts(&mut model, &mut r);
    let frames = r.random_range(2..=6);
    let x = random_features(&mut r, frames, 4);
    let tape = Tape::inference();
    let enc = model.first.encode(&tape, &model.store, &x)?.value();
    let hyps = rnnt_decode(&model.first, &model.store, &enc, 2)?.hyps;
    let seqs = all_sequences(VOCAB, MAX_LEN);
    let beam = second_pass_beam(&model, &enc, &hyps, 1, lambda, seqs.len(), MAX_LEN)?;
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for s in seqs {
        let sc = score_sequence(&model, &enc, &hyps, 1, lambda, &s)?;
        if sc > best.1 || (sc == best.1 && s < best.0) {
            best = (s, sc);
        }
    }
    let top = beam.into_iter().next().ok_or_else(|| Error::Model("empty beam".into()))?;
    Ok(((top.tokens, top.score), best))
}

/// Best first-pass score at widths `1..=max_width` on one random model.
pub fn first_pass_scores_by_width(seed: u64, max_width: usize) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, 0xF1);
    let model = Model::new(tiny_config(Variant::Las, seed, 6))?;
    let frames = r.random_range(2..=8);
    let x = random_features(&mut r, frames, 4);
    let tape = Tape::inference();
    let enc = model.first.encode(&tape, &model.store, &x)?.value();
    (1..=max_width)
        .map(|w| Ok(rnnt_decode(&model.first, &model.store, &enc, w)?.best().map_or(f64::NEG_INFINITY, |h| h.score)))
        .collect()
}

fn beam_oracle_suite(seed: u64, n: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::BeamOracle);
    for i in 0..n {
        let s = rng::derive_seed(seed, i);
        let lambda = [1.0, 0.5, 0.1][(i % 3) as usize];
        let ((bt, bs), (ot, os)) = beam_vs_brute_force(s, lambda)?;
        rep.check(bt == ot && (bs - os).abs() <= 1e-9, || {
            format!("model {i}: beam {bt:?} ({bs}) vs brute force {ot:?} ({os})")
        });
        let scores = first_pass_scores_by_width(s, 5)?;
        rep.check(scores.windows(2).all(|w| w[1] >= w[0]), || {
            format!("model {i}: first-pass best score drops with width: {scores:?}")
        });
    }
    Ok(rep)
}
