use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoiceKind {
    RealVoice,
    TtsVoice,
    HeldOutVoice,
}

/// Acoustic parameters shared by every voice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoiceConfig {
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Per-utterance speaker offset standard deviation.
    pub speaker_sigma: f64,
    /// Norm of the synthetic voice offsets.
    pub tts_offset_norm: f64,
    /// In `[0, 1)`: how much each rare token's signature borrows from a
    /// common token's signature (0 = unrelated).
    pub rare_confusion: f64,
}

impl Default for VoiceConfig {
    fn default() -> Self {
        VoiceConfig {
            feature_dim: 8,
            noise_sigma: 0.1,
            speaker_sigma: 0.1,
            tts_offset_norm: 1.0,
            rare_confusion: 0.0,
        }
    }
}

/// Per-token frame signatures plus a voice-level offset.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub kind: VoiceKind,
    pub dim: usize,
    pub noise_sigma: f64,
    pub speaker_sigma: f64,
    pub offset: Vec<f64>,
    signatures: Vec<Vec<f64>>,
}

fn normal_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn scaled_to(v: &[f64], norm: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x * norm / n).collect()
}

/// Frames per token: 2, 3 or 4, fixed by the token id and seed.
pub fn signature_len(seed: u64, token: usize) -> usize {
    2 + (rng::derive_seed(seed, 0x5167 + token as u64) % 3) as usize
}

impl Codebook {
    pub fn build(vocab: &Vocab, cfg: &VoiceConfig, kind: VoiceKind, seed: u64) -> Result<Self> {
        if cfg.feature_dim < 2 {
            return Err(Error::Corpus("feature dim must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&cfg.rare_confusion) {
            return Err(Error::Corpus("rare_confusion must lie in [0, 1)".into()));
        }
        let d = cfg.feature_dim;
        let mut r = rng::stream(seed, 0xC0DE);
        let mut signatures = vec![Vec::new(); vocab.size()];
        for t in vocab.common().chain(vocab.rare()) {
            signatures[t] = normal_vec(&mut r, signature_len(seed, t) * d);
        }
        if cfg.rare_confusion > 0.0 {
            let common: Vec<usize> = vocab.common().collect();
            for (i, t) in vocab.rare().enumerate() {
                let partner = &signatures[common[i % common.len()]];
                let a = cfg.rare_confusion;
                let fresh = signatures[t].clone();
                signatures[t] = (0..fresh.len())
                    .map(|j| a * partner[j % partner.len()] + (1.0 - a) * fresh[j])
                    .collect();
            }
        }

        let mut r = rng::stream(seed, 0x0FF5E7);
        let tts = scaled_to(&normal_vec(&mut r, d), cfg.tts_offset_norm);
        // held-out direction: orthogonal to the training synthetic voice
        let raw = normal_vec(&mut r, d);
        let proj = raw.iter().zip(&tts).map(|(a, b)| a * b).sum::<f64>()
            / tts.iter().map(|b| b * b).sum::<f64>().max(f64::MIN_POSITIVE);
        let ortho: Vec<f64> = raw.iter().zip(&tts).map(|(a, b)| a - proj * b).collect();
        let offset = match kind {
            VoiceKind::RealVoice => vec![0.0; d],
            VoiceKind::TtsVoice => tts,
            VoiceKind::HeldOutVoice => scaled_to(&ortho, cfg.tts_offset_norm),
        };
        Ok(Codebook {
            kind,
            dim: d,
            noise_sigma: cfg.noise_sigma,
            speaker_sigma: cfg.speaker_sigma,
            offset,
            signatures,
        })
    }

    pub fn frames_for(&self, token: usize) -> Option<usize> {
        match self.signatures.get(token) {
            Some(s) if !s.is_empty() => Some(s.len() / self.dim),
            _ => None,
        }
    }

    pub fn signature(&self, token: usize) -> Option<&[f64]> {
        self.signatures
            .get(token)
            .filter(|s| !s.is_empty())
            .map(|s| s.as_slice())
    }
}

/// Concatenated token signatures, plus the voice offset, a per-utterance
/// speaker offset and i.i.d. Gaussian noise. Deterministic in all inputs.
pub fn synthesize(transcript: &[usize], codebook: &Codebook, seed: u64) -> Result<Tensor> {
    let d = codebook.dim;
    let mut frames = Vec::new();
    for &t in transcript {
        let sig = codebook
            .signature(t)
            .ok_or_else(|| Error::Corpus(format!("token {t} has no acoustic signature")))?;
        frames.extend_from_slice(sig);
    }
    if frames.is_empty() {
        return Err(Error::Corpus("cannot synthesize an empty transcript".into()));
    }
    let mut r = rng::seeded(seed);
    let speaker: Vec<f64> = (0..d)
        .map(|_| codebook.speaker_sigma * r.sample::<f64, _>(StandardNormal))
        .collect();
    let t = frames.len() / d;
    for (i, v) in frames.iter_mut().enumerate() {
        let noise: f64 = if codebook.noise_sigma > 0.0 {
            codebook.noise_sigma * r.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        *v += codebook.offset[i % d] + speaker[i % d] + noise;
    }
    Tensor::matrix(t, d, frames)
}
