//! A complete two-pass model: first pass, second pass and the parameter
//! store they share.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Gate, ParamGroup, ParamStore};
use crate::delib::{SecondPass, SecondPassConfig, Variant};
use crate::error::{Error, Result};
use crate::rng;
use crate::rnnt::{FirstPass, FirstPassConfig};

pub const MODEL_JSON: &str = "model.json";
pub const PARAMS_BIN: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub seed: u64,
    pub variant: Variant,
    pub first_pass: FirstPassConfig,
    pub second_pass: SecondPassConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 1,
            variant: Variant::DelibJatdFull,
            first_pass: FirstPassConfig::default(),
            second_pass: SecondPassConfig::default(),
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        let (f, s) = (&self.first_pass, &self.second_pass);
        if f.vocab_size != s.vocab_size {
            return Err(Error::Config(format!(
                "first pass vocabulary {} differs from second pass {}",
                f.vocab_size, s.vocab_size
            )));
        }
        if f.encoder_projection != s.encoder_dim {
            return Err(Error::Config(format!(
                "encoder output dim {} differs from the second pass encoder dim {}",
                f.encoder_projection, s.encoder_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub first: FirstPass,
    pub second: SecondPass,
}

/// First pass alone in its own store, with the same initial weights a full
/// model built from `config` would have.
pub fn first_pass_only(config: &ModelConfig) -> Result<(ParamStore, FirstPass)> {
    let mut store = ParamStore::new();
    let first = FirstPass::new(&mut store, config.first_pass.clone(), &mut rng::stream(config.seed, 1))?;
    Ok((store, first))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (mut store, first) = first_pass_only(&config)?;
        let second = SecondPass::new(
            &mut store,
            config.second_pass.clone(),
            config.variant,
            &mut rng::stream(config.seed, 2),
        )?;
        Ok(Model {
            config,
            store,
            first,
            second,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Groups owned by the first pass and the shared encoder.
    pub fn first_pass_groups(store: &ParamStore) -> Vec<ParamGroup> {
        store
            .groups()
            .iter()
            .filter(|g| matches!(g.gate, Gate::FirstPass | Gate::EncoderStack))
            .cloned()
            .collect()
    }

    /// Copies first-pass and encoder weights from another store.
    pub fn load_first_pass(&mut self, from: &ParamStore) -> Result<()> {
        self.store.replace_named(Self::first_pass_groups(from))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&self.config)?;
        let path = dir.join(MODEL_JSON);
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        checkpoint::save(&self.store, &dir.join(PARAMS_BIN))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Model::new(config)?;
        checkpoint::load_into(&mut model.store, &dir.join(PARAMS_BIN))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_contexts_do_not_shift_shared_weights() {
        let full = Model::new(ModelConfig::default()).unwrap();
        let plain = Model::new(ModelConfig {
            variant: Variant::Deliberation,
            ..ModelConfig::default()
        })
        .unwrap();
        for gate in [Gate::EncoderStack, Gate::FirstPass, Gate::EncoderAttention, Gate::SecondPassDecoder] {
            let (a, b) = (full.store.snapshot(gate), plain.store.snapshot(gate));
            assert_eq!(a.len(), b.len());
            assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in m.store.ids().zip(back.store.ids()) {
            assert!(m.store.get(a).bit_eq(back.store.get(b)));
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.second_pass.vocab_size = 30;
        assert!(Model::new(cfg).is_err());
    }
}
