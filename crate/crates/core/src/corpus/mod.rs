//! Deterministic synthetic corpus: paired real-voice utterances over common
//! tokens, rare-heavy text rendered with a synthetic voice, and test sets
//! that isolate rare-token recognition under seen and unseen voices.

pub mod io;
mod synth;
mod vocab;

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use synth::{signature_len, synthesize, Codebook, VoiceConfig, VoiceKind};
pub use vocab::{Vocab, BLANK, EOS};

pub use crate::autodiff::ExampleKind;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};

/// Fraction of the mixed training set made of paired audio.
pub const PAIRED_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_common: usize,
    pub num_rare: usize,
    pub voice: VoiceConfig,
    pub min_len: usize,
    pub max_len: usize,
    pub num_paired: usize,
    pub num_unpaired: usize,
    pub test_size: usize,
    /// Held-out slice of the common-distribution test set, used for
    /// interpolation-weight selection.
    pub dev_size: usize,
    /// Floor on how often each rare token appears in the unpaired text.
    pub min_rare_occurrences: usize,
    /// How many paired utterances each rare token may appear in (0 or 1).
    pub paired_rare_occurrences: usize,
    /// Minimum fraction of rare tokens per unpaired transcript.
    pub rare_density: f64,
    /// Likely successors per common token; 0 draws tokens independently.
    pub branching: usize,
    /// Probability of leaving the successor set for a uniform draw.
    pub smoothing: f64,
    /// Successors per rare token inside a two-token rare word.
    pub rare_successors: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            num_common: 16,
            num_rare: 6,
            voice: VoiceConfig::default(),
            min_len: 2,
            max_len: 6,
            num_paired: 2000,
            num_unpaired: 222,
            test_size: 200,
            dev_size: 50,
            min_rare_occurrences: 20,
            paired_rare_occurrences: 1,
            rare_density: 0.5,
            branching: 4,
            smoothing: 0.1,
            rare_successors: 2,
        }
    }
}

impl CorpusConfig {
    /// Sets paired/unpaired counts for a total training-set size at the
    /// 90/10 mix.
    pub fn with_total(mut self, total: usize) -> Self {
        self.num_paired = (total as f64 * PAIRED_FRACTION).round() as usize;
        self.num_unpaired = total - self.num_paired;
        self
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.num_common, self.num_rare)
    }

    fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Corpus(format!(
                "invalid transcript length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.paired_rare_occurrences > 1 {
            return Err(Error::Corpus("rare tokens may appear at most once in paired data".into()));
        }
        if !(0.0..=1.0).contains(&self.rare_density) || !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::Corpus("rare_density and smoothing must lie in [0, 1]".into()));
        }
        if self.num_rare > 0 && self.paired_rare_occurrences > 0 && self.num_paired < self.num_rare {
            return Err(Error::Corpus("not enough paired utterances to place each rare token once".into()));
        }
        if self.num_rare > 0 && self.min_rare_occurrences > 0 {
            let slots = self.num_unpaired * self.max_len;
            if slots < self.num_rare * self.min_rare_occurrences {
                return Err(Error::Corpus(format!(
                    "{} unpaired utterances cannot hold {} occurrences of each of {} rare tokens",
                    self.num_unpaired, self.min_rare_occurrences, self.num_rare
                )));
            }
        }
        Ok(())
    }

    pub fn codebook(&self, kind: VoiceKind) -> Result<Codebook> {
        Codebook::build(&self.vocab()?, &self.voice, kind, derive_seed(self.seed, 100))
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub features: Option<Tensor>,
    pub transcript: Vec<usize>,
    pub kind: ExampleKind,
    pub voice: VoiceKind,
}

impl Example {
    pub fn features(&self) -> Result<&Tensor> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::Corpus(format!("example {} has no features", self.id)))
    }
}

#[derive(Clone, Debug)]
pub struct TestSets {
    pub dev: Vec<Example>,
    pub vs_like: Vec<Example>,
    pub rare_tts: Vec<Example>,
    pub rare_spoken: Vec<Example>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub paired: Vec<Example>,
    pub unpaired: Vec<Example>,
    pub tests: TestSets,
}

impl Corpus {
    pub fn build(config: &CorpusConfig) -> Result<Corpus> {
        let (paired, unpaired) = build_training_set(config)?;
        let tests = build_test_sets(config, &paired, &unpaired)?;
        Ok(Corpus {
            config: config.clone(),
            paired,
            unpaired,
            tests,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab().expect("validated at build")
    }

    /// Named splits in a fixed order.
    pub fn splits(&self) -> [(&'static str, &[Example]); 6] {
        [
            ("train_paired", &self.paired),
            ("train_unpaired", &self.unpaired),
            ("dev", &self.tests.dev),
            ("vs_like", &self.tests.vs_like),
            ("rare_tts", &self.tests.rare_tts),
            ("rare_spoken", &self.tests.rare_spoken),
        ]
    }
}

/// Transcript generator: a sparse Markov chain over common tokens, with
/// rare tokens arriving as two-token rare words.
struct Grammar {
    vocab: Vocab,
    common_next: Vec<Vec<usize>>,
    rare_next: Vec<Vec<usize>>,
    smoothing: f64,
}

impl Grammar {
    fn new(cfg: &CorpusConfig) -> Result<Self> {
        let vocab = cfg.vocab()?;
        let mut r = rng::stream(cfg.seed, 0x6A44);
        let common: Vec<usize> = vocab.common().collect();
        let rare: Vec<usize> = vocab.rare().collect();
        let pick = |r: &mut rng::Rng, pool: &[usize], k: usize| -> Vec<usize> {
            if k == 0 || pool.is_empty() {
                return Vec::new();
            }
            pool.choose_multiple(r, k.min(pool.len())).copied().collect()
        };
        let mut common_next = vec![Vec::new(); vocab.size()];
        for &t in &common {
            common_next[t] = pick(&mut r, &common, cfg.branching);
        }
        let mut rare_next = vec![Vec::new(); vocab.size()];
        for &t in &rare {
            let others: Vec<usize> = rare.iter().copied().filter(|&x| x != t).collect();
            let pool = if others.is_empty() { rare.clone() } else { others };
            rare_next[t] = pick(&mut r, &pool, cfg.rare_successors.max(1));
        }
        Ok(Grammar {
            vocab,
            common_next,
            rare_next,
            smoothing: cfg.smoothing,
        })
    }

    fn next_common(&self, r: &mut rng::Rng, prev: Option<usize>) -> usize {
        let succ = prev.map(|p| &self.common_next[p]).filter(|s| !s.is_empty());
        match succ {
            Some(s) if r.random::<f64>() >= self.smoothing => *s.choose(r).unwrap(),
            _ => r.random_range(self.vocab.common()),
        }
    }

    fn common_sentence(&self, r: &mut rng::Rng, len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let prev = out.last().copied();
            out.push(self.next_common(r, prev));
        }
        out
    }

    /// At least `ceil(density * len)` rare tokens, placed as rare words.
    /// `first` supplies the leading token of each rare word.
    fn rare_sentence(
        &self,
        r: &mut rng::Rng,
        len: usize,
        density: f64,
        mut first: impl FnMut(&mut rng::Rng) -> usize,
    ) -> Vec<usize> {
        if self.vocab.num_rare == 0 {
            return self.common_sentence(r, len);
        }
        let need = ((density * len as f64).ceil() as usize).min(len);
        let words = need.div_ceil(2);
        let rare_tokens = (2 * words).min(len);
        let mut commons = len - rare_tokens;
        // interleave rare words and common runs in random order
        let mut units: Vec<bool> = vec![true; words];
        units.extend(std::iter::repeat_n(false, commons));
        for i in (1..units.len()).rev() {
            let j = r.random_range(0..=i);
            units.swap(i, j);
        }
        let mut out = Vec::with_capacity(len);
        let mut remaining_rare = rare_tokens;
        for is_rare in units {
            if is_rare {
                let a = first(r);
                out.push(a);
                remaining_rare -= 1;
                if remaining_rare > 0 {
                    out.push(*self.rare_next[a].choose(r).unwrap());
                    remaining_rare -= 1;
                }
            } else {
                let prev = out.last().copied().filter(|&t| !self.vocab.is_rare(t));
                out.push(self.next_common(r, prev));
                commons -= 1;
            }
        }
        debug_assert_eq!(commons, 0);
        out
    }
}

fn utterance(
    id: String,
    transcript: Vec<usize>,
    kind: ExampleKind,
    codebook: &Codebook,
    seed: u64,
) -> Result<Example> {
    let features = synthesize(&transcript, codebook, seed)?;
    Ok(Example {
        id,
        features: Some(features),
        transcript,
        kind,
        voice: codebook.kind,
    })
}

const STREAM_PAIRED: u64 = 1;
const STREAM_UNPAIRED: u64 = 2;
const STREAM_VS: u64 = 3;
const STREAM_RARE: u64 = 4;
const STREAM_AUDIO: u64 = 0xA0D10;

/// Paired real-voice utterances over common tokens, and rare-heavy text
/// rendered with the synthetic training voice.
pub fn build_training_set(cfg: &CorpusConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let grammar = Grammar::new(cfg)?;
    let real = cfg.codebook(VoiceKind::RealVoice)?;
    let tts = cfg.codebook(VoiceKind::TtsVoice)?;

    let paired_seed = derive_seed(cfg.seed, STREAM_PAIRED);
    let mut paired_text: Vec<Vec<usize>> = (0..cfg.num_paired)
        .map(|i| {
            let mut r = rng::stream(paired_seed, i as u64);
            let len = r.random_range(cfg.min_len..=cfg.max_len);
            grammar.common_sentence(&mut r, len)
        })
        .collect();
    if cfg.paired_rare_occurrences == 1 && vocab.num_rare > 0 {
        // each rare token lands in exactly one distinct paired utterance
        let mut r = rng::stream(paired_seed, u64::MAX);
        let hosts: Vec<usize> = (0..cfg.num_paired).collect::<Vec<_>>()
            .choose_multiple(&mut r, vocab.num_rare)
            .copied()
            .collect();
        for (tok, host) in vocab.rare().zip(hosts) {
            let pos = r.random_range(0..paired_text[host].len());
            paired_text[host][pos] = tok;
        }
    }

    let unpaired_seed = derive_seed(cfg.seed, STREAM_UNPAIRED);
    let mut usage: BTreeMap<usize, usize> = vocab.rare().map(|t| (t, 0)).collect();
    let mut unpaired_text = Vec::with_capacity(cfg.num_unpaired);
    for i in 0..cfg.num_unpaired {
        let mut r = rng::stream(unpaired_seed, i as u64);
        let len = r.random_range(cfg.min_len..=cfg.max_len);
        let text = grammar.rare_sentence(&mut r, len, cfg.rare_density, |r| {
            let least = *usage.values().min().unwrap();
            let cands: Vec<usize> = usage.iter().filter(|(_, &c)| c == least).map(|(&t, _)| t).collect();
            *cands.choose(r).unwrap()
        });
        for t in &text {
            if let Some(c) = usage.get_mut(t) {
                *c += 1;
            }
        }
        unpaired_text.push(text);
    }
    if let Some((&tok, &count)) = usage.iter().find(|(_, &c)| c < cfg.min_rare_occurrences) {
        return Err(Error::Corpus(format!(
            "rare token {tok} appears {count} times in unpaired text, below the floor of {}",
            cfg.min_rare_occurrences
        )));
    }

    let audio = derive_seed(cfg.seed, STREAM_AUDIO);
    let paired = paired_text
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let seed = derive_seed(derive_seed(audio, STREAM_PAIRED), i as u64);
            utterance(format!("train_paired-{i:05}"), text, ExampleKind::Paired, &real, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let unpaired = unpaired_text
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let seed = derive_seed(derive_seed(audio, STREAM_UNPAIRED), i as u64);
            utterance(format!("train_unpaired-{i:05}"), text, ExampleKind::Unpaired, &tts, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((paired, unpaired))
}

const MAX_DRAWS: usize = 10_000;

/// Draws `n` transcripts absent from `seen`, adding them to it.
fn fresh_transcripts(
    n: usize,
    seed: u64,
    seen: &mut HashSet<Vec<usize>>,
    mut draw: impl FnMut(&mut rng::Rng) -> Vec<usize>,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        let mut found = None;
        for _ in 0..MAX_DRAWS {
            let t = draw(&mut r);
            if !seen.contains(&t) {
                found = Some(t);
                break;
            }
        }
        let t = found.ok_or_else(|| {
            Error::Corpus("could not draw a test transcript disjoint from training data".into())
        })?;
        seen.insert(t.clone());
        out.push(t);
    }
    Ok(out)
}

/// Common-distribution real-voice test set (with a dev slice), and one set
/// of rare-heavy transcripts rendered twice: with an unseen synthetic voice
/// and with the real voice.
pub fn build_test_sets(
    cfg: &CorpusConfig,
    paired: &[Example],
    unpaired: &[Example],
) -> Result<TestSets> {
    cfg.validate()?;
    let grammar = Grammar::new(cfg)?;
    let real = cfg.codebook(VoiceKind::RealVoice)?;
    let held_out = cfg.codebook(VoiceKind::HeldOutVoice)?;
    let mut seen: HashSet<Vec<usize>> = paired
        .iter()
        .chain(unpaired)
        .map(|e| e.transcript.clone())
        .collect();
    let training = seen.clone();

    let vs_text = fresh_transcripts(
        cfg.dev_size + cfg.test_size,
        derive_seed(cfg.seed, STREAM_VS),
        &mut seen,
        |r| {
            let len = r.random_range(cfg.min_len..=cfg.max_len);
            grammar.common_sentence(r, len)
        },
    )?;
    let vocab = cfg.vocab()?;
    let rare: Vec<usize> = vocab.rare().collect();
    let rare_text = fresh_transcripts(cfg.test_size, derive_seed(cfg.seed, STREAM_RARE), &mut seen, |r| {
        let len = r.random_range(cfg.min_len..=cfg.max_len);
        grammar.rare_sentence(r, len, cfg.rare_density, |r| *rare.choose(r).unwrap_or(&2))
    })?;
    debug_assert!(vs_text.iter().chain(&rare_text).all(|t| !training.contains(t)));

    let audio = derive_seed(derive_seed(cfg.seed, STREAM_AUDIO), 0x7E57);
    let render = |name: &str, texts: &[Vec<usize>], offset: usize, cb: &Codebook, stream: u64| {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let seed = derive_seed(derive_seed(audio, stream), (offset + i) as u64);
                utterance(format!("{name}-{i:05}"), t.clone(), ExampleKind::Paired, cb, seed)
            })
            .collect::<Result<Vec<_>>>()
    };
    let (dev_text, vs_rest) = vs_text.split_at(cfg.dev_size);
    Ok(TestSets {
        dev: render("dev", dev_text, 0, &real, 1)?,
        vs_like: render("vs_like", vs_rest, cfg.dev_size, &real, 1)?,
        rare_tts: render("rare_tts", &rare_text, 0, &held_out, 2)?,
        rare_spoken: render("rare_spoken", &rare_text, 0, &real, 3)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_paired: 180,
            num_unpaired: 20,
            test_size: 30,
            dev_size: 10,
            min_rare_occurrences: 3,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn ninety_ten_split() {
        let c = CorpusConfig::default().with_total(1000);
        assert_eq!((c.num_paired, c.num_unpaired), (900, 100));
        let d = CorpusConfig::default();
        assert_eq!((d.num_paired, d.num_unpaired), (2000, 222));
    }

    #[test]
    fn paired_rare_tokens_appear_at_most_once() {
        let cfg = small();
        let (paired, unpaired) = build_training_set(&cfg).unwrap();
        assert_eq!(paired.len(), 180);
        assert_eq!(unpaired.len(), 20);
        let v = cfg.vocab().unwrap();
        for tok in v.rare() {
            let n: usize = paired.iter().map(|e| e.transcript.iter().filter(|&&t| t == tok).count()).sum();
            assert!(n <= 1, "rare token {tok} appears {n} times");
        }
    }

    #[test]
    fn unpaired_text_is_rare_heavy() {
        let cfg = small();
        let (_, unpaired) = build_training_set(&cfg).unwrap();
        let v = cfg.vocab().unwrap();
        for e in &unpaired {
            let rare = e.transcript.iter().filter(|&&t| v.is_rare(t)).count();
            assert!(rare as f64 >= 0.5 * e.transcript.len() as f64);
            assert_eq!(e.kind, ExampleKind::Unpaired);
            assert_eq!(e.voice, VoiceKind::TtsVoice);
        }
    }

    #[test]
    fn frame_count_matches_signature_lengths() {
        let cfg = small();
        let (paired, _) = build_training_set(&cfg).unwrap();
        let cb = cfg.codebook(VoiceKind::RealVoice).unwrap();
        for e in paired.iter().take(20) {
            let expect: usize = e.transcript.iter().map(|&t| cb.frames_for(t).unwrap()).sum();
            assert_eq!(e.features.as_ref().unwrap().rows(), expect);
        }
    }

    #[test]
    fn empty_rare_set_still_generates() {
        let cfg = CorpusConfig {
            num_rare: 0,
            ..small()
        };
        let (_, unpaired) = build_training_set(&cfg).unwrap();
        assert_eq!(unpaired.len(), 20);
    }

    #[test]
    fn infeasible_split_is_an_error() {
        let cfg = CorpusConfig {
            num_unpaired: 2,
            min_rare_occurrences: 50,
            ..small()
        };
        assert!(matches!(build_training_set(&cfg), Err(Error::Corpus(_))));
    }

    #[test]
    fn test_sets_are_disjoint_and_use_expected_voices() {
        let corpus = Corpus::build(&small()).unwrap();
        let train: HashSet<_> = corpus.paired.iter().chain(&corpus.unpaired).map(|e| &e.transcript).collect();
        for (_, split) in &corpus.splits()[2..] {
            assert!(split.iter().all(|e| !train.contains(&e.transcript)));
        }
        assert!(corpus.tests.rare_tts.iter().all(|e| e.voice == VoiceKind::HeldOutVoice));
        assert!(corpus.tests.rare_spoken.iter().all(|e| e.voice == VoiceKind::RealVoice));
        for (a, b) in corpus.tests.rare_tts.iter().zip(&corpus.tests.rare_spoken) {
            assert_eq!(a.transcript, b.transcript);
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = Corpus::build(&small()).unwrap();
        let b = Corpus::build(&small()).unwrap();
        for ((_, x), (_, y)) in a.splits().iter().zip(b.splits().iter()) {
            for (e, f) in x.iter().zip(y.iter()) {
                assert_eq!(e.transcript, f.transcript);
                assert!(e.features.as_ref().unwrap().bit_eq(f.features.as_ref().unwrap()));
            }
        }
    }
}
