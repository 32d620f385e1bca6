//! Decoding, word error rate and the experiment matrix.

pub mod decode;
pub mod experiment;
pub mod wer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use decode::{
    exhaustive_second_pass, score_sequence, second_pass_beam, two_pass_decode, DecodeConfig, TwoPassOutput,
};
pub use experiment::{run_experiment_matrix, ExperimentConfig, Report, Row, System};
pub use wer::{align, apply_script, count_errors, wer, EditOp, ErrorCounts};

use crate::autodiff::{ParamStore, Tape};
use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rnnt::{rnnt_decode, FirstPass};

/// Applies `f` to every item on up to `threads` scoped workers, keeping
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Model("decode worker panicked".into()))??);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub counts: ErrorCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub wer: f64,
    pub counts: ErrorCounts,
    pub utterances: Vec<Utterance>,
}

fn score_set(examples: &[Example], hyps: Vec<Vec<usize>>) -> Result<SetResult> {
    let mut counts = ErrorCounts::default();
    let utterances: Vec<Utterance> = examples
        .iter()
        .zip(hyps)
        .map(|(e, h)| {
            let c = count_errors(&e.transcript, &h);
            counts.add(&c);
            Utterance {
                id: e.id.clone(),
                reference: e.transcript.clone(),
                hypothesis: h,
                counts: c,
            }
        })
        .collect();
    Ok(SetResult {
        wer: counts.wer()?,
        counts,
        utterances,
    })
}

/// Two-pass decoding of a test set at a fixed interpolation weight.
pub fn evaluate_two_pass(model: &Model, examples: &[Example], cfg: &DecodeConfig, lambda: f64, threads: usize) -> Result<SetResult> {
    let hyps = parallel_map(examples, threads, |e| {
        Ok(two_pass_decode(model, e.features()?, cfg, lambda)?.best().to_vec())
    })?;
    score_set(examples, hyps)
}

/// First-pass beam decoding alone.
pub fn evaluate_first_pass(
    store: &ParamStore,
    first: &FirstPass,
    examples: &[Example],
    beam: usize,
    threads: usize,
) -> Result<SetResult> {
    let hyps = parallel_map(examples, threads, |e| {
        let tape = Tape::inference();
        let enc = first.encode(&tape, store, e.features()?)?.value();
        Ok(rnnt_decode(first, store, &enc, beam)?
            .best()
            .map(|h| h.tokens.clone())
            .unwrap_or_default())
    })?;
    score_set(examples, hyps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(lambda, dev WER)` for every grid point tried.
    pub dev_wer: Vec<(f64, f64)>,
}

/// Picks the grid weight with the lowest dev WER, preferring the smaller
/// weight on ties. Models without a fixed-context branch always use 1.
pub fn select_lambda(model: &Model, dev: &[Example], cfg: &DecodeConfig, threads: usize) -> Result<LambdaSelection> {
    if !model.variant().is_jatd() {
        return Ok(LambdaSelection {
            lambda: 1.0,
            dev_wer: Vec::new(),
        });
    }
    cfg.validate()?;
    let mut grid = cfg.lambda_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut dev_wer = Vec::with_capacity(grid.len());
    for &l in &grid {
        dev_wer.push((l, evaluate_two_pass(model, dev, cfg, l, threads)?.wer));
    }
    let lambda = pick_lambda(&dev_wer);
    Ok(LambdaSelection { lambda, dev_wer })
}

fn pick_lambda(scores: &[(f64, f64)]) -> f64 {
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 < best.1 || (s.1 == best.1 && s.0 < best.0) {
            best = s;
        }
    }
    best.0
}

/// Second-pass WER on each test set at the dev-selected weight, plus the
/// same model's first-pass output as the baseline decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub lambda: f64,
    pub dev_wer: Vec<(f64, f64)>,
    pub sets: BTreeMap<String, SetResult>,
    pub first_pass: BTreeMap<String, SetResult>,
    pub samples: Vec<experiment::Sample>,
}

impl EvalReport {
    /// Mean WER over the rare-word test sets.
    pub fn rare_wer(&self) -> f64 {
        let rare = [experiment::TEST_SETS[1], experiment::TEST_SETS[2]];
        rare.iter().map(|s| self.sets.get(*s).map_or(f64::NAN, |r| r.wer)).sum::<f64>() / rare.len() as f64
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12}{:>12}{:>12}{:>8}{:>8}{:>8}\n", "set", "first pass", "two pass", "S", "I", "D");
        for (name, r) in &self.sets {
            let fp = self.first_pass.get(name).map_or(f64::NAN, |x| x.wer);
            s.push_str(&format!(
                "{:<12}{:>12.2}{:>12.2}{:>8}{:>8}{:>8}\n",
                name,
                100.0 * fp,
                100.0 * r.wer,
                r.counts.substitutions,
                r.counts.insertions,
                r.counts.deletions
            ));
        }
        s.push_str(&format!("lambda {}\n", self.lambda));
        s
    }
}

pub fn evaluate_model(model: &Model, corpus: &Corpus, cfg: &DecodeConfig, threads: usize, samples: usize) -> Result<EvalReport> {
    let sel = select_lambda(model, &corpus.tests.dev, cfg, threads)?;
    let mut sets = BTreeMap::new();
    let mut first_pass = BTreeMap::new();
    let mut picked = Vec::new();
    for (name, ex) in experiment::test_sets(corpus) {
        let two = evaluate_two_pass(model, ex, cfg, sel.lambda, threads)?;
        let one = evaluate_first_pass(&model.store, &model.first, ex, cfg.beam1, threads)?;
        picked.extend(experiment::win_loss(&model.variant().to_string(), name, &two, &one, samples));
        sets.insert(name.to_string(), two);
        first_pass.insert(name.to_string(), one);
    }
    Ok(EvalReport {
        variant: model.variant().to_string(),
        lambda: sel.lambda,
        dev_wer: sel.dev_wer,
        sets,
        first_pass,
        samples: picked,
    })
}
