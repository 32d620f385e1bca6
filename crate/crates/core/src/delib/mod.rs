//! Second-pass decoder attending to the shared encoding and to encoded
//! first-pass hypotheses, with learnable fixed context vectors that stand
//! in for the attention contexts on the language-model branch.

mod loss;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use loss::{second_pass_loss, LossBreakdown, Prepared};

use crate::autodiff::{concat, Gate, ParamId, ParamStore, Tape, Var};
use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::nn::{bilstm_forward, AttentionMemory, Embedding, Init, Linear, LstmLayer, LstmState, MultiHeadAttention};
use crate::rng::Rng;
use crate::rnnt::Hypothesis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Las,
    LasJatd,
    Deliberation,
    DelibJatdPartial,
    DelibJatdFull,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Las,
        Variant::LasJatd,
        Variant::Deliberation,
        Variant::DelibJatdPartial,
        Variant::DelibJatdFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Las => "las",
            Variant::LasJatd => "las-jatd",
            Variant::Deliberation => "deliberation",
            Variant::DelibJatdPartial => "delib-jatd-partial",
            Variant::DelibJatdFull => "delib-jatd-full",
        }
    }

    pub fn attends_hypotheses(self) -> bool {
        !matches!(self, Variant::Las | Variant::LasJatd)
    }

    pub fn is_jatd(self) -> bool {
        matches!(self, Variant::LasJatd | Variant::DelibJatdPartial | Variant::DelibJatdFull)
    }

    pub fn has_fixed_hyp_context(self) -> bool {
        self == Variant::DelibJatdFull
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecondPassConfig {
    pub vocab_size: usize,
    pub encoder_dim: usize,
    pub hyp_len: usize,
    pub hyp_embed_dim: usize,
    pub hyp_hidden: usize,
    pub hyp_projection: usize,
    pub attention_dim: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_projection: usize,
}

impl Default for SecondPassConfig {
    fn default() -> Self {
        SecondPassConfig {
            vocab_size: 24,
            encoder_dim: 16,
            hyp_len: 12,
            hyp_embed_dim: 8,
            hyp_hidden: 16,
            hyp_projection: 8,
            attention_dim: 16,
            num_heads: 2,
            embed_dim: 8,
            decoder_hidden: 32,
            decoder_projection: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HypothesisEncoder {
    pub embed: Embedding,
    pub forward: LstmLayer,
    pub backward: LstmLayer,
}

/// Encoded first-pass hypotheses: `k` blocks of `L` rows each.
#[derive(Clone, Debug)]
pub struct HypothesisEncoding<'t> {
    pub padded_tokens: Vec<Vec<usize>>,
    pub encoded: Var<'t>,
    /// Set when some hypothesis was longer than `L` and got cut.
    pub truncated: bool,
}

/// Attention sources for one utterance, projected once.
pub struct Sources<'t> {
    pub encoder: AttentionMemory<'t>,
    pub hypotheses: Option<AttentionMemory<'t>>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState<'t> {
    pub lstm: LstmState<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Acoustic,
    Lm,
}

#[derive(Clone, Debug)]
pub struct SecondPass {
    pub config: SecondPassConfig,
    pub variant: Variant,
    pub enc_attention: MultiHeadAttention,
    pub hyp_encoder: Option<HypothesisEncoder>,
    pub hyp_attention: Option<MultiHeadAttention>,
    pub embed: Embedding,
    pub lstm: LstmLayer,
    pub output: Linear,
    pub fixed_e: Option<ParamId>,
    pub fixed_b: Option<ParamId>,
}

impl SecondPass {
    /// Fixed context vectors are zero-initialized and created last, so two
    /// variants built from the same seed share every other weight.
    pub fn new(store: &mut ParamStore, config: SecondPassConfig, variant: Variant, rng: &mut Rng) -> Result<Self> {
        let a = config.attention_dim;
        let q = config.decoder_projection;
        let group = store.add_group("enc_attention", Gate::EncoderAttention);
        let mut init = Init { store, group, rng };
        let enc_attention = MultiHeadAttention::new(&mut init, "enc_attn", q, config.encoder_dim, a, config.num_heads)?;

        let (hyp_encoder, hyp_attention) = if variant.attends_hypotheses() {
            init.group = init.store.add_group("hyp_encoder", Gate::HypothesisEncoder);
            let embed = Embedding::new(&mut init, "hyp.embed", config.vocab_size, config.hyp_embed_dim);
            let proj = Some(config.hyp_projection);
            let forward = LstmLayer::new(&mut init, "hyp.fwd", config.hyp_embed_dim, config.hyp_hidden, proj);
            let backward = LstmLayer::new(&mut init, "hyp.bwd", config.hyp_embed_dim, config.hyp_hidden, proj);
            init.group = init.store.add_group("hyp_attention", Gate::HypothesisAttention);
            let attn = MultiHeadAttention::new(&mut init, "hyp_attn", q, 2 * config.hyp_projection, a, config.num_heads)?;
            (
                Some(HypothesisEncoder {
                    embed,
                    forward,
                    backward,
                }),
                Some(attn),
            )
        } else {
            (None, None)
        };

        let contexts = if variant.attends_hypotheses() { 2 } else { 1 };
        init.group = init.store.add_group("decoder", Gate::SecondPassDecoder);
        let embed = Embedding::new(&mut init, "dec.embed", config.vocab_size, config.embed_dim);
        let lstm = LstmLayer::new(
            &mut init,
            "dec.lstm",
            config.embed_dim + contexts * a,
            config.decoder_hidden,
            Some(q),
        );
        let output = Linear::new(&mut init, "dec.out", q + contexts * a, config.vocab_size, true);

        let fixed_e = variant.is_jatd().then(|| {
            init.group = init.store.add_group("fixed_context_e", Gate::FixedContextE);
            init.zeros("c_e_l", &[1, a])
        });
        let fixed_b = variant.has_fixed_hyp_context().then(|| {
            init.group = init.store.add_group("fixed_context_b", Gate::FixedContextB);
            init.zeros("c_b_l", &[1, a])
        });
        Ok(SecondPass {
            config,
            variant,
            enc_attention,
            hyp_encoder,
            hyp_attention,
            embed,
            lstm,
            output,
            fixed_e,
            fixed_b,
        })
    }

    /// Pads (or truncates) each of the best `top_k` hypotheses to `L`
    /// tokens with EOS and runs the bidirectional encoder over each.
    pub fn encode_hypotheses<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        hyps: &[Hypothesis],
        top_k: usize,
    ) -> Result<HypothesisEncoding<'t>> {
        let enc = self
            .hyp_encoder
            .as_ref()
            .ok_or_else(|| Error::Model(format!("variant {} has no hypothesis encoder", self.variant)))?;
        if hyps.is_empty() || top_k == 0 {
            return Err(Error::Model("no first-pass hypotheses to encode".into()));
        }
        let l = self.config.hyp_len;
        let mut truncated = false;
        let mut padded_tokens = Vec::new();
        let mut blocks = Vec::new();
        for h in hyps.iter().take(top_k) {
            let mut tokens: Vec<usize> = h.tokens.iter().copied().take(l).collect();
            truncated |= h.tokens.len() > l;
            tokens.resize(l, EOS);
            let x = enc.embed.forward(tape, store, &tokens)?;
            blocks.push(bilstm_forward(tape, store, &enc.forward, &enc.backward, x)?);
            padded_tokens.push(tokens);
        }
        Ok(HypothesisEncoding {
            padded_tokens,
            encoded: concat(&blocks, 0)?,
            truncated,
        })
    }

    pub fn sources<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        enc: Var<'t>,
        hyps: Option<&HypothesisEncoding<'t>>,
    ) -> Result<Sources<'t>> {
        let encoder = self.enc_attention.memory(tape, store, enc, enc)?;
        let hypotheses = match (&self.hyp_attention, hyps) {
            (Some(attn), Some(h)) => Some(attn.memory(tape, store, h.encoded, h.encoded)?),
            (Some(_), None) => {
                return Err(Error::Model(format!("variant {} needs encoded hypotheses", self.variant)));
            }
            (None, _) => None,
        };
        Ok(Sources { encoder, hypotheses })
    }

    pub fn initial_state<'t>(&self, tape: &'t Tape) -> DecoderState<'t> {
        DecoderState {
            lstm: self.lstm.zero_state(tape),
        }
    }

    /// One decoder step on a branch: returns `1 x V` log-probs and the next
    /// state. The previous output `h` is the attention query; EOS doubles as
    /// the start symbol.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        sources: &Sources<'t>,
        prev_token: usize,
        state: DecoderState<'t>,
        branch: Branch,
    ) -> Result<(Var<'t>, DecoderState<'t>)> {
        if branch == Branch::Lm && !self.variant.is_jatd() {
            return Err(Error::Model(format!("variant {} has no fixed-context branch", self.variant)));
        }
        let query = state.lstm.h;
        let c_e = match (branch, self.fixed_e) {
            (Branch::Lm, Some(id)) => tape.param(store, id),
            _ => self.enc_attention.attend(tape, store, query, &sources.encoder)?.0,
        };
        let mut contexts = vec![c_e];
        if let Some(attn) = &self.hyp_attention {
            let c_b = match (branch, self.fixed_b) {
                (Branch::Lm, Some(id)) => tape.param(store, id),
                _ => {
                    let mem = sources
                        .hypotheses
                        .as_ref()
                        .ok_or_else(|| Error::Model(format!("variant {} needs encoded hypotheses", self.variant)))?;
                    attn.attend(tape, store, query, mem)?.0
                }
            };
            contexts.push(c_b);
        }
        let emb = self.embed.forward(tape, store, &[prev_token])?;
        let mut input = vec![emb];
        input.extend_from_slice(&contexts);
        let lstm = self.lstm.step(tape, store, concat(&input, 1)?, state.lstm)?;
        let mut feats = vec![lstm.h];
        feats.extend_from_slice(&contexts);
        let logits = self.output.forward(tape, store, concat(&feats, 1)?)?;
        Ok((logits.log_softmax(), DecoderState { lstm }))
    }

    pub fn step_acoustic<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        sources: &Sources<'t>,
        prev_token: usize,
        state: DecoderState<'t>,
    ) -> Result<(Var<'t>, DecoderState<'t>)> {
        self.step(tape, store, sources, prev_token, state, Branch::Acoustic)
    }

    pub fn step_lm<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        sources: &Sources<'t>,
        prev_token: usize,
        state: DecoderState<'t>,
    ) -> Result<(Var<'t>, DecoderState<'t>)> {
        self.step(tape, store, sources, prev_token, state, Branch::Lm)
    }
}

/// `lambda * acoustic + (1 - lambda) * lm`, elementwise.
pub fn interpolate(acoustic: &[f64], lm: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if acoustic.len() != lm.len() {
        return Err(Error::shape("interpolate", &[acoustic.len()], &[lm.len()]));
    }
    check_lambda(lambda)?;
    Ok(if lambda == 1.0 {
        acoustic.to_vec()
    } else if lambda == 0.0 {
        lm.to_vec()
    } else {
        acoustic
            .iter()
            .zip(lm)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect()
    })
}

/// Tape version of [`interpolate`].
pub fn interpolate_var<'t>(acoustic: Var<'t>, lm: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    check_lambda(lambda)?;
    if acoustic.shape() != lm.shape() {
        return Err(Error::shape("interpolate", &acoustic.shape(), &lm.shape()));
    }
    if lambda == 1.0 {
        return Ok(acoustic);
    }
    if lambda == 0.0 {
        return Ok(lm);
    }
    acoustic.scale(lambda).add(lm.scale(1.0 - lambda))
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid("interpolate", format!("lambda {lambda} outside [0, 1]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng;
    use rand::Rng as _;

    pub(super) fn build(variant: Variant, seed: u64) -> (ParamStore, SecondPass) {
        let mut store = ParamStore::new();
        let m = SecondPass::new(&mut store, SecondPassConfig::default(), variant, &mut rng::seeded(seed)).unwrap();
        (store, m)
    }

    fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn hyp(tokens: &[usize]) -> Hypothesis {
        Hypothesis {
            tokens: tokens.to_vec(),
            score: 0.0,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("delib".parse::<Variant>().is_err());
    }

    #[test]
    fn las_variants_have_no_hypothesis_blocks() {
        for v in [Variant::Las, Variant::LasJatd] {
            let (store, m) = build(v, 1);
            assert!(m.hyp_attention.is_none() && m.hyp_encoder.is_none());
            assert_eq!(store.group(Gate::HypothesisAttention).count(), 0);
        }
        let (_, partial) = build(Variant::DelibJatdPartial, 1);
        assert!(partial.fixed_e.is_some() && partial.fixed_b.is_none());
        let (_, full) = build(Variant::DelibJatdFull, 1);
        assert!(full.fixed_e.is_some() && full.fixed_b.is_some());
    }

    #[test]
    fn hypothesis_padding_and_shape() {
        let (store, m) = build(Variant::Deliberation, 2);
        let tape = Tape::inference();
        let e = m.encode_hypotheses(&tape, &store, &[hyp(&[3, 4])], 1).unwrap();
        assert_eq!(e.encoded.shape(), vec![12, 16]);
        assert_eq!(&e.padded_tokens[0][2..], &[EOS; 10]);
        assert!(!e.truncated);
        let long = m.encode_hypotheses(&tape, &store, &[hyp(&[2; 15])], 1).unwrap();
        assert!(long.truncated);
        let dup = m.encode_hypotheses(&tape, &store, &[hyp(&[5, 6]), hyp(&[5, 6])], 2).unwrap();
        let v = dup.encoded.value();
        assert_eq!(v.rows(), 24);
        assert_eq!(&v.data()[..12 * 16], &v.data()[12 * 16..]);
        assert!(m.encode_hypotheses(&tape, &store, &[], 1).is_err());
    }

    #[test]
    fn step_outputs_are_normalized() {
        for v in Variant::ALL {
            let (store, m) = build(v, 3);
            let tape = Tape::inference();
            let enc = tape.constant(rand_t(4, 16, 4));
            let hyps = v
                .attends_hypotheses()
                .then(|| m.encode_hypotheses(&tape, &store, &[hyp(&[3, 7])], 1).unwrap());
            let src = m.sources(&tape, &store, enc, hyps.as_ref()).unwrap();
            let (lp, _) = m.step_acoustic(&tape, &store, &src, EOS, m.initial_state(&tape)).unwrap();
            let lse = crate::autodiff::tensor::log_sum_exp(lp.value().data());
            assert!(lse.abs() < 1e-10);
            let lm = m.step_lm(&tape, &store, &src, EOS, m.initial_state(&tape));
            assert_eq!(lm.is_ok(), v.is_jatd());
        }
    }

    #[test]
    fn deliberation_needs_hypotheses() {
        let (store, m) = build(Variant::Deliberation, 5);
        let tape = Tape::inference();
        assert!(m.sources(&tape, &store, tape.constant(rand_t(3, 16, 1)), None).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = [-1.0, -0.5];
        let b = [-3.0, -2.0];
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b);
        assert_eq!(interpolate(&[-1.0], &[-3.0], 0.5).unwrap(), vec![-2.0]);
        assert!(interpolate(&a, &[1.0], 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }
}
