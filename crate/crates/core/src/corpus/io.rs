//! On-disk corpus: `manifest.json` plus one file per split.
//!
//! Binary split files share the checkpoint header and tensor encoding; each
//! record is `id_len u32, id, kind u8, voice u8, n u32, n x u32 tokens,
//! has_features u8, [tensor]`. The text format writes one JSON object per
//! line instead.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusConfig, Example, ExampleKind, TestSets, VoiceKind};
use crate::autodiff::checkpoint::{self, Reader};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Binary,
    Text,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(DataFormat::Binary),
            "text" => Ok(DataFormat::Text),
            other => Err(Error::Config(format!("unknown data format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: DataFormat,
    pub vocab_size: usize,
    pub config: CorpusConfig,
    pub splits: Vec<SplitEntry>,
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    id: String,
    kind: ExampleKind,
    voice: VoiceKind,
    transcript: Vec<usize>,
    features: Option<Vec<Vec<f64>>>,
}

fn kind_code(k: ExampleKind) -> u8 {
    match k {
        ExampleKind::Paired => 0,
        ExampleKind::Unpaired => 1,
    }
}

fn voice_code(v: VoiceKind) -> u8 {
    match v {
        VoiceKind::RealVoice => 0,
        VoiceKind::TtsVoice => 1,
        VoiceKind::HeldOutVoice => 2,
    }
}

pub fn encode_split(examples: &[Example]) -> Vec<u8> {
    let mut out = Vec::new();
    checkpoint::write_header(&mut out);
    for e in examples {
        out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.id.as_bytes());
        out.push(kind_code(e.kind));
        out.push(voice_code(e.voice));
        out.extend_from_slice(&(e.transcript.len() as u32).to_le_bytes());
        for &t in &e.transcript {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        match &e.features {
            Some(f) => {
                out.push(1);
                checkpoint::write_tensor(&mut out, f);
            }
            None => out.push(0),
        }
    }
    out
}

pub fn decode_split(buf: &[u8]) -> Result<Vec<Example>> {
    let mut r = Reader::new(buf)?;
    let mut out = Vec::new();
    while !r.at_end() {
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("example id is not UTF-8".into()))?
            .to_string();
        let kind = match r.u8()? {
            0 => ExampleKind::Paired,
            1 => ExampleKind::Unpaired,
            c => return Err(Error::Format(format!("unknown example kind {c}"))),
        };
        let voice = match r.u8()? {
            0 => VoiceKind::RealVoice,
            1 => VoiceKind::TtsVoice,
            2 => VoiceKind::HeldOutVoice,
            c => return Err(Error::Format(format!("unknown voice {c}"))),
        };
        let n = r.u32()? as usize;
        let transcript = (0..n).map(|_| r.u32().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
        let features = match r.u8()? {
            0 => None,
            1 => Some(r.tensor()?),
            c => return Err(Error::Format(format!("bad feature flag {c}"))),
        };
        out.push(Example {
            id,
            features,
            transcript,
            kind,
            voice,
        });
    }
    Ok(out)
}

fn write_text(path: &Path, examples: &[Example]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for e in examples {
        let rec = TextRecord {
            id: e.id.clone(),
            kind: e.kind,
            voice: e.voice,
            transcript: e.transcript.clone(),
            features: e
                .features
                .as_ref()
                .map(|t| (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<Vec<Example>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line)?;
        let features = match rec.features {
            Some(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != cols) {
                    return Err(Error::Format(format!("ragged feature rows in {}", rec.id)));
                }
                Some(Tensor::matrix(rows.len(), cols, rows.concat())?)
            }
            None => None,
        };
        out.push(Example {
            id: rec.id,
            features,
            transcript: rec.transcript,
            kind: rec.kind,
            voice: rec.voice,
        });
    }
    Ok(out)
}

/// Writes the corpus under `dir`, refusing to overwrite an existing
/// manifest unless `force` is set.
pub fn save(corpus: &Corpus, dir: &Path, format: DataFormat, force: bool) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists (use --force to overwrite)",
            manifest_path.display()
        )));
    }
    let ext = match format {
        DataFormat::Binary => "bin",
        DataFormat::Text => "jsonl",
    };
    let mut splits = Vec::new();
    for (name, examples) in corpus.splits() {
        let file = format!("{name}.{ext}");
        let path = dir.join(&file);
        match format {
            DataFormat::Binary => checkpoint::write_file(&path, &encode_split(examples))?,
            DataFormat::Text => write_text(&path, examples)?,
        }
        splits.push(SplitEntry {
            name: name.to_string(),
            file,
            count: examples.len(),
        });
    }
    let manifest = Manifest {
        format,
        vocab_size: corpus.vocab().size(),
        config: corpus.config.clone(),
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let vocab = manifest.config.vocab()?;
    let split = |name: &str| -> Result<Vec<Example>> {
        let entry = manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Corpus(format!("manifest lists no split {name:?}")))?;
        let path = dir.join(&entry.file);
        let examples = match manifest.format {
            DataFormat::Binary => decode_split(&checkpoint::read_file(&path)?)?,
            DataFormat::Text => read_text(&path)?,
        };
        if examples.len() != entry.count {
            return Err(Error::Corpus(format!(
                "split {name} has {} examples, manifest says {}",
                examples.len(),
                entry.count
            )));
        }
        for e in &examples {
            vocab.check_transcript(&e.transcript)?;
        }
        Ok(examples)
    };
    Ok(Corpus {
        paired: split("train_paired")?,
        unpaired: split("train_unpaired")?,
        tests: TestSets {
            dev: split("dev")?,
            vs_like: split("vs_like")?,
            rare_tts: split("rare_tts")?,
            rare_spoken: split("rare_spoken")?,
        },
        config: manifest.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Corpus {
        Corpus::build(&CorpusConfig {
            num_paired: 54,
            num_unpaired: 6,
            test_size: 4,
            dev_size: 2,
            min_rare_occurrences: 1,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn same(a: &Corpus, b: &Corpus, exact: bool) {
        for ((na, xa), (nb, xb)) in a.splits().iter().zip(b.splits().iter()) {
            assert_eq!(na, nb);
            assert_eq!(xa.len(), xb.len());
            for (e, f) in xa.iter().zip(xb.iter()) {
                assert_eq!((&e.id, &e.transcript, e.kind, e.voice), (&f.id, &f.transcript, f.kind, f.voice));
                let (fe, ff) = (e.features.as_ref().unwrap(), f.features.as_ref().unwrap());
                if exact {
                    assert!(fe.bit_eq(ff));
                } else {
                    assert!(fe.max_abs_diff(ff) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        save(&c, dir.path(), DataFormat::Binary, false).unwrap();
        same(&c, &load(dir.path()).unwrap(), true);
    }

    #[test]
    fn text_round_trip() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        save(&c, dir.path(), DataFormat::Text, false).unwrap();
        same(&c, &load(dir.path()).unwrap(), false);
    }

    #[test]
    fn refuses_to_overwrite_without_force() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        save(&c, dir.path(), DataFormat::Binary, false).unwrap();
        assert!(save(&c, dir.path(), DataFormat::Binary, false).is_err());
        assert!(save(&c, dir.path(), DataFormat::Binary, true).is_ok());
    }

    #[test]
    fn missing_features_survive() {
        let mut ex = tiny().paired;
        ex[0].features = None;
        let back = decode_split(&encode_split(&ex)).unwrap();
        assert!(back[0].features.is_none());
        assert!(back[1].features.is_some());
    }
}
