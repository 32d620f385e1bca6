//! Top-level run configuration and the manifest written next to every
//! artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::DecodeConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const RUN_MANIFEST: &str = "run.json";
pub const SEED_ENV: &str = "DJTD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; copied into the corpus and model seeds on resolve.
    pub seed: u64,
    pub threads: usize,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            threads: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies the seed override (flag first, then environment) and spreads
    /// the global seed into the sub-configs.
    pub fn resolve(mut self, seed_flag: Option<u64>) -> Result<Self> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(s) = seed_flag.or(env) {
            self.seed = s;
        }
        self.corpus.seed = self.seed;
        self.model.seed = self.seed;
        let vocab = self.corpus.vocab()?.size();
        self.model.first_pass.vocab_size = vocab;
        self.model.second_pass.vocab_size = vocab;
        self.model.first_pass.feature_dim = self.corpus.voice.feature_dim;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seed: u64,
    pub build_id: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn build_id() -> String {
    match option_env!("DJTD_BUILD_ID") {
        Some(id) if !id.is_empty() => format!("{}-{id}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &RunConfig, started_unix: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            seed: config.seed,
            build_id: build_id(),
            started_unix,
            finished_unix: unix_now(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        // partial files fill in defaults
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 9, "train": {"steps": 5}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.train.steps, 5);
        assert_eq!(partial.decode, DecodeConfig::default());
    }

    #[test]
    fn flag_seed_spreads_to_sub_configs() {
        let c = RunConfig::default().resolve(Some(42)).unwrap();
        assert_eq!((c.seed, c.corpus.seed, c.model.seed), (42, 42, 42));
    }
}
