//! Two-stage training: transducer pretraining on paired audio, then
//! second-pass training with per-kind gradient gating.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_update, checkpoint, concat, ExampleKind, Gate, GradMask, GradStore, Optimizer, OptimizerConfig, ParamStore, Tape};
use crate::corpus::{Corpus, Example};
use crate::delib::{second_pass_loss, Prepared, Variant};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, derive_seed};
use crate::rnnt::{rnnt_decode, FirstPass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMix {
    /// Paired audio only.
    Paired,
    /// Paired audio plus text rendered with the synthetic voice.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataMix,
    pub lambda_train: f64,
    /// First-pass beam used to produce second-pass inputs.
    pub beam1: usize,
    pub top_k: usize,
    pub freeze_first_pass: bool,
    pub pretrain_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip_norm: f64,
    /// Cosine decay of the learning rate to this fraction of its initial
    /// value over each stage; 1 keeps it constant.
    pub lr_floor: f64,
    pub checkpoint_every: usize,
    /// Apply the paired/unpaired gating to variants without fixed contexts
    /// too. Off by default: those baselines train on mixed data unmasked.
    pub gate_all_variants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DataMix::Mixed,
            lambda_train: 0.5,
            beam1: 2,
            top_k: 1,
            freeze_first_pass: true,
            pretrain_steps: 3000,
            steps: 10_000,
            batch_size: 8,
            optimizer: OptimizerConfig::default().with_lr(1e-2),
            clip_norm: 5.0,
            lr_floor: 0.05,
            checkpoint_every: 500,
            gate_all_variants: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_train) {
            return Err(Error::Config(format!("lambda_train {} outside [0, 1]", self.lambda_train)));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return Err(Error::Config(format!("lr_floor {} outside (0, 1]", self.lr_floor)));
        }
        if self.beam1 == 0 || self.top_k == 0 || self.batch_size == 0 {
            return Err(Error::Config("beam1, top_k and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Update masks for paired and unpaired examples.
    pub fn masks(&self, variant: Variant) -> (GradMask, GradMask) {
        let gated = variant.is_jatd() || self.gate_all_variants;
        let mask = |kind| {
            let m = if gated { GradMask::joint(kind) } else { GradMask::open(kind) };
            if self.freeze_first_pass {
                m.freeze(Gate::FirstPass).freeze(Gate::EncoderStack)
            } else {
                m
            }
        };
        (mask(ExampleKind::Paired), mask(ExampleKind::Unpaired))
    }
}

/// Learning-rate multiplier before step `step` (0-based) of `total`.
pub fn lr_scale(floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 || floor >= 1.0 {
        return 1.0;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub acoustic: f64,
    pub lm: f64,
    pub paired: usize,
    pub unpaired: usize,
}

fn sample_batch(n: usize, size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, step as u64);
    (0..size).map(|_| r.random_range(0..n)).collect()
}

const PRETRAIN_STREAM: u64 = 0x9E7;
const TRAIN_STREAM: u64 = 0x7A1;

/// Trains the first pass alone on paired examples.
pub fn pretrain_first_pass(
    store: &mut ParamStore,
    first: &FirstPass,
    paired: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    if paired.is_empty() {
        return Err(Error::Corpus("no paired examples to pretrain on".into()));
    }
    let mut opt = Optimizer::new(store, cfg.optimizer, Some(cfg.clip_norm));
    let mask = GradMask::open(ExampleKind::Paired);
    let stream = derive_seed(seed, PRETRAIN_STREAM);
    for step in 0..cfg.pretrain_steps {
        let batch = sample_batch(paired.len(), cfg.batch_size, stream, step);
        opt.lr_scale = lr_scale(cfg.lr_floor, step, cfg.pretrain_steps);
        let tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let e = &paired[i];
            let enc = first.encode(&tape, store, e.features()?)?;
            losses.push(first.loss(&tape, store, enc, &e.transcript)?.reshape(&[1, 1])?);
        }
        let loss = concat(&losses, 1)?.sum().scale(1.0 / batch.len() as f64);
        let value = loss.value().item();
        let grads = tape.backward(loss)?.params(store);
        drop(tape);
        apply_update(store, &grads, &mask, &mut opt)?;
        on_step(&StepMetrics {
            stage: "pretrain".into(),
            step: step + 1,
            loss: value,
            paired: batch.len(),
            ..StepMetrics::default()
        })?;
    }
    Ok(())
}

/// First-pass n-best for each example; with `cache_encoder` the encoder
/// output is stored so training can skip recomputing it.
pub fn prepare(model: &Model, examples: &[Example], beam: usize, top_k: usize, cache_encoder: bool) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|e| {
            let tape = Tape::inference();
            let enc = model.first.encode(&tape, &model.store, e.features()?)?.value();
            let mut hyps = rnnt_decode(&model.first, &model.store, &enc, beam)?.hyps;
            hyps.truncate(top_k);
            let mut p = Prepared::from_example(e, hyps);
            if cache_encoder {
                p.encoded = Some((*enc).clone());
            }
            Ok(p)
        })
        .collect()
}

/// One optimizer step. Each example kind's gradient is masked with that
/// kind's gates before the two are summed; groups frozen for every kind
/// present in the batch are left untouched, optimizer state included.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &[&Prepared],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Model("empty batch".into()));
    }
    let (paired_mask, unpaired_mask) = cfg.masks(model.variant());
    let mut total = GradStore::zeros_like(&model.store);
    let mut frozen: Option<BTreeSet<Gate>> = None;
    let mut metrics = StepMetrics {
        stage: "train".into(),
        ..StepMetrics::default()
    };
    let b = batch.len() as f64;
    for (kind, mask) in [(ExampleKind::Paired, &paired_mask), (ExampleKind::Unpaired, &unpaired_mask)] {
        let sub: Vec<&Prepared> = batch.iter().copied().filter(|p| p.kind == kind).collect();
        if sub.is_empty() {
            continue;
        }
        let share = sub.len() as f64 / b;
        let tape = Tape::new();
        let out = second_pass_loss(&tape, &model.store, &model.first, &model.second, &sub, cfg.lambda_train, cfg.top_k)?;
        let mut grads = tape.backward(out.loss)?.params(&model.store);
        grads.scale(share);
        for id in model.store.ids().collect::<Vec<_>>() {
            if mask.is_frozen(model.store.gate_of(id)) {
                grads.get_mut(id).data_mut().fill(0.0);
            }
        }
        total.add_assign(&grads);
        frozen = Some(match frozen {
            None => mask.frozen.clone(),
            Some(f) => f.intersection(&mask.frozen).copied().collect(),
        });
        metrics.loss += share * out.loss.value().item();
        metrics.acoustic += share * out.acoustic;
        metrics.lm += share * out.lm;
        match kind {
            ExampleKind::Paired => metrics.paired = sub.len(),
            ExampleKind::Unpaired => metrics.unpaired = sub.len(),
        }
    }
    let mask = GradMask {
        example_kind: if metrics.paired > 0 { ExampleKind::Paired } else { ExampleKind::Unpaired },
        frozen: frozen.unwrap_or_default(),
    };
    apply_update(&mut model.store, &total, &mask, opt)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
}

pub const OPTIMIZER_BIN: &str = "optimizer.bin";
pub const STATE_JSON: &str = "state.json";
pub const FIRST_PASS_BIN: &str = "first_pass.bin";

/// Second-pass training loop with resumable checkpoints.
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub pool: Vec<Prepared>,
    pub step: usize,
    seed: u64,
}

impl Trainer {
    /// `model` must already hold the pretrained first pass.
    pub fn new(model: Model, corpus: &Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut examples: Vec<Example> = corpus.paired.clone();
        if config.data == DataMix::Mixed {
            examples.extend(corpus.unpaired.iter().cloned());
        }
        if examples.is_empty() {
            return Err(Error::Corpus("no training examples".into()));
        }
        let pool = prepare(&model, &examples, config.beam1, config.top_k, config.freeze_first_pass)?;
        let optimizer = Optimizer::new(&model.store, config.optimizer, Some(config.clip_norm));
        let seed = derive_seed(model.config.seed, TRAIN_STREAM);
        Ok(Trainer {
            model,
            optimizer,
            config,
            pool,
            step: 0,
            seed,
        })
    }

    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let idx = sample_batch(self.pool.len(), self.config.batch_size, self.seed, self.step);
        let fresh: Vec<Prepared>;
        let batch: Vec<&Prepared> = if self.config.freeze_first_pass {
            idx.iter().map(|&i| &self.pool[i]).collect()
        } else {
            // first pass still moving: decode with the current weights
            fresh = idx
                .iter()
                .map(|&i| {
                    let p = &self.pool[i];
                    let tape = Tape::inference();
                    let enc = p.encode(&tape, &self.model.store, &self.model.first)?.value();
                    let mut hyps = rnnt_decode(&self.model.first, &self.model.store, &enc, self.config.beam1)?.hyps;
                    hyps.truncate(self.config.top_k);
                    Ok(Prepared { hyps, ..p.clone() })
                })
                .collect::<Result<_>>()?;
            fresh.iter().collect()
        };
        self.optimizer.lr_scale = lr_scale(self.config.lr_floor, self.step, self.config.steps);
        let mut m = train_step(&mut self.model, &mut self.optimizer, &batch, &self.config)?;
        self.step += 1;
        m.step = self.step;
        Ok(m)
    }

    /// Trains until `config.steps`, checkpointing into `dir` (when given)
    /// every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, dir: Option<&Path>, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let m = self.step_once()?;
            on_step(&m)?;
            if let Some(d) = dir {
                if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                    self.save(d)?;
                }
            }
        }
        if let Some(d) = dir {
            self.save(d)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let opt = checkpoint::encode(&self.optimizer.state_groups(&self.model.store));
        checkpoint::write_file(&dir.join(OPTIMIZER_BIN), &opt)?;
        let path = dir.join(STATE_JSON);
        fs::write(&path, serde_json::to_string(&TrainState { step: self.step })?).map_err(|e| Error::io(&path, e))
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        checkpoint::load_into(&mut self.model.store, &dir.join(crate::model::PARAMS_BIN))?;
        let groups = checkpoint::decode(&checkpoint::read_file(&dir.join(OPTIMIZER_BIN))?)?;
        self.optimizer.load_state_groups(&self.model.store, &groups)?;
        let path = dir.join(STATE_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_str(&text)?;
        self.step = state.step;
        Ok(())
    }
}

/// Appends one JSON line per metrics record.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        MetricsLog { out }
    }

    pub fn log(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("<metrics>", e))
    }
}
