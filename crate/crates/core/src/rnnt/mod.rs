//! Streaming first pass: shared acoustic encoder, label prediction network,
//! joint network, transducer loss and decoding.

mod decode;
pub mod lattice;

use serde::{Deserialize, Serialize};

pub use decode::{
    beam_search, exhaustive_decode, greedy_decode, rnnt_decode, write_nbest_jsonl, FirstPassResult,
    Hypothesis, NBestRecord,
};
pub use lattice::{brute_force_nll, enumerate_alignments, rnnt_nll, Lattice};

use crate::autodiff::{Gate, ParamStore, Tape, Tensor, Var};
use crate::corpus::BLANK;
use crate::error::{Error, Result};
use crate::nn::{Embedding, Init, Linear, LstmLayer, LstmState, TimeReduction};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirstPassConfig {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub encoder_hidden: usize,
    pub encoder_projection: usize,
    pub reduction_factor: usize,
    pub embed_dim: usize,
    pub pred_hidden: usize,
    pub pred_projection: usize,
    pub joint_dim: usize,
    pub max_label_len: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for FirstPassConfig {
    fn default() -> Self {
        FirstPassConfig {
            feature_dim: 8,
            vocab_size: 24,
            encoder_hidden: 32,
            encoder_projection: 16,
            reduction_factor: 2,
            embed_dim: 8,
            pred_hidden: 32,
            pred_projection: 16,
            joint_dim: 16,
            max_label_len: 32,
            max_symbols_per_frame: 3,
        }
    }
}

/// Two LSTM layers with frame-pair stacking between them.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub lower: LstmLayer,
    pub reduction: TimeReduction,
    pub upper: LstmLayer,
}

impl Encoder {
    pub fn output_dim(&self) -> usize {
        self.upper.output_dim()
    }

    /// `T x D` features to `ceil(T/2) x E` encodings.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, features: &Tensor) -> Result<Var<'t>> {
        if features.shape().len() != 2 || features.cols() != self.lower.input_dim {
            return Err(Error::shape("encode", &[self.lower.input_dim], features.shape()));
        }
        let x = tape.constant(features.clone());
        let (h, _) = self.lower.forward(tape, store, x, None)?;
        let (e, _) = self.upper.forward(tape, store, self.reduction.apply(h)?, None)?;
        Ok(e)
    }
}

#[derive(Clone, Debug)]
pub struct FirstPass {
    pub config: FirstPassConfig,
    pub encoder: Encoder,
    pub embed: Embedding,
    pub pred: LstmLayer,
    pub joint_enc: Linear,
    pub joint_pred: Linear,
    pub joint_out: Linear,
}

/// Prediction-network state after consuming a label prefix, with its
/// joint-space projection.
#[derive(Clone, Copy, Debug)]
pub struct PredState<'t> {
    pub lstm: LstmState<'t>,
    pub projected: Var<'t>,
}

impl FirstPass {
    /// Adds the `encoder` (EncoderStack) and `first_pass` (FirstPass)
    /// groups to `store`.
    pub fn new(store: &mut ParamStore, config: FirstPassConfig, rng: &mut Rng) -> Result<Self> {
        if config.vocab_size < 2 || config.reduction_factor == 0 || config.max_symbols_per_frame == 0 {
            return Err(Error::Config("invalid first-pass configuration".into()));
        }
        let group = store.add_group("encoder", Gate::EncoderStack);
        let mut init = Init { store, group, rng };
        let reduction = TimeReduction {
            factor: config.reduction_factor,
        };
        let lower = LstmLayer::new(
            &mut init,
            "encoder.lstm0",
            config.feature_dim,
            config.encoder_hidden,
            Some(config.encoder_projection),
        );
        let upper = LstmLayer::new(
            &mut init,
            "encoder.lstm1",
            config.encoder_projection * config.reduction_factor,
            config.encoder_hidden,
            Some(config.encoder_projection),
        );
        let group = init.store.add_group("first_pass", Gate::FirstPass);
        init.group = group;
        let embed = Embedding::new(&mut init, "pred.embed", config.vocab_size, config.embed_dim);
        let pred = LstmLayer::new(
            &mut init,
            "pred.lstm",
            config.embed_dim,
            config.pred_hidden,
            Some(config.pred_projection),
        );
        let joint_enc = Linear::new(&mut init, "joint.enc", config.encoder_projection, config.joint_dim, false);
        let joint_pred = Linear::new(&mut init, "joint.pred", config.pred_projection, config.joint_dim, true);
        let joint_out = Linear::new(&mut init, "joint.out", config.joint_dim, config.vocab_size, true);
        Ok(FirstPass {
            config,
            encoder: Encoder {
                lower,
                reduction,
                upper,
            },
            embed,
            pred,
            joint_enc,
            joint_pred,
            joint_out,
        })
    }

    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, features: &Tensor) -> Result<Var<'t>> {
        self.encoder.forward(tape, store, features)
    }

    /// Joint-space projection of every encoder frame.
    pub fn project_encoder<'t>(&self, tape: &'t Tape, store: &ParamStore, enc: Var<'t>) -> Result<Var<'t>> {
        self.joint_enc.forward(tape, store, enc)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() > self.config.max_label_len {
            return Err(Error::invalid(
                "rnnt_loss",
                format!("{} labels exceed the maximum of {}", labels.len(), self.config.max_label_len),
            ));
        }
        Ok(())
    }

    /// Per-node log-probs `T'(U+1) x V` for a label sequence.
    pub fn log_probs<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        enc: Var<'t>,
        labels: &[usize],
    ) -> Result<Var<'t>> {
        self.check_labels(labels)?;
        let mut ids = Vec::with_capacity(labels.len() + 1);
        ids.push(BLANK);
        ids.extend_from_slice(labels);
        let (pred, _) = self
            .pred
            .forward(tape, store, self.embed.forward(tape, store, &ids)?, None)?;
        let p = self.joint_pred.forward(tape, store, pred)?;
        let e = self.project_encoder(tape, store, enc)?;
        let hidden = e.pair_add(p)?.tanh();
        Ok(self.joint_out.forward(tape, store, hidden)?.log_softmax())
    }

    /// `-log P(labels | features)`.
    pub fn loss<'t>(&self, tape: &'t Tape, store: &ParamStore, enc: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        let frames = enc.shape()[0];
        let lp = self.log_probs(tape, store, enc, labels)?;
        rnnt_nll(lp, frames, labels)
    }

    /// State after consuming only the start symbol.
    pub fn initial_state<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<PredState<'t>> {
        let zero = self.pred.zero_state(tape);
        self.advance(tape, store, BLANK, zero)
    }

    /// Feeds one label to the prediction network.
    pub fn advance<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        token: usize,
        state: LstmState<'t>,
    ) -> Result<PredState<'t>> {
        let x = self.embed.forward(tape, store, &[token])?;
        let lstm = self.pred.step(tape, store, x, state)?;
        let projected = self.joint_pred.forward(tape, store, lstm.h)?;
        Ok(PredState { lstm, projected })
    }

    /// Output distribution at one lattice node, from a projected encoder
    /// row and a prediction state.
    pub fn joint_step(
        &self,
        tape: &Tape,
        store: &ParamStore,
        enc_row: Var<'_>,
        state: &PredState<'_>,
    ) -> Result<Vec<f64>> {
        let hidden = enc_row.add(state.projected)?.tanh();
        let lp = self.joint_out.forward(tape, store, hidden)?.log_softmax();
        Ok(lp.value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model(store: &mut ParamStore) -> FirstPass {
        FirstPass::new(store, FirstPassConfig::default(), &mut rng::seeded(3)).unwrap()
    }

    fn features(t: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        Tensor::matrix(t, 8, (0..t * 8).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoder_output_lengths() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let tape = Tape::inference();
        for (t, expect) in [(1, 1), (6, 3), (7, 4)] {
            assert_eq!(m.encode(&tape, &store, &features(t, 1)).unwrap().shape(), vec![expect, 16]);
        }
        assert!(m.encode(&tape, &store, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn zero_encoder_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let ids: Vec<_> = store.ids().filter(|&id| store.gate_of(id) == Gate::EncoderStack).collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let tape = Tape::inference();
        let e = m.encode(&tape, &store, &features(5, 2)).unwrap().value();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_probs_are_normalized_and_loss_in_range() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let tape = Tape::new();
        let enc = m.encode(&tape, &store, &features(6, 3)).unwrap();
        let lp = m.log_probs(&tape, &store, enc, &[4, 9]).unwrap().value();
        assert_eq!(lp.shape(), &[9, 24]);
        for r in 0..lp.rows() {
            let s: f64 = lp.row_slice(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let loss = m.loss(&tape, &store, enc, &[4, 9]).unwrap().value().item();
        assert!(loss > 0.0 && loss.is_finite());
    }

    #[test]
    fn incremental_steps_match_batched_log_probs() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let tape = Tape::inference();
        let enc = m.encode(&tape, &store, &features(4, 4)).unwrap();
        let labels = [5, 7];
        let lp = m.log_probs(&tape, &store, enc, &labels).unwrap().value();
        let ej = m.project_encoder(&tape, &store, enc).unwrap();
        let mut state = m.initial_state(&tape, &store).unwrap();
        for u in 0..=labels.len() {
            for t in 0..2 {
                let step = m.joint_step(&tape, &store, ej.slice(0, t, 1).unwrap(), &state).unwrap();
                let row = lp.row_slice(t * 3 + u);
                for (a, b) in step.iter().zip(row) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            if u < labels.len() {
                state = m.advance(&tape, &store, labels[u], state.lstm).unwrap();
            }
        }
    }

    #[test]
    fn overlong_labels_are_rejected() {
        let mut store = ParamStore::new();
        let m = model(&mut store);
        let tape = Tape::new();
        let enc = m.encode(&tape, &store, &features(4, 5)).unwrap();
        assert!(m.loss(&tape, &store, enc, &[2; 33]).is_err());
    }
}
