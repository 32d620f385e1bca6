use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate_first_pass, evaluate_two_pass, select_lambda, DecodeConfig, SetResult};
use crate::corpus::{Corpus, Example};
use crate::delib::Variant;
use crate::error::{Error, Result};
use crate::model::{first_pass_only, Model, ModelConfig};
use crate::train::{pretrain_first_pass, DataMix, TrainConfig, Trainer};

/// What a row trains: the transducer alone, or a second-pass variant on
/// top of the paired-data transducer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Rnnt(DataMix),
    Second(Variant, DataMix),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub system: System,
}

impl Row {
    pub const STANDARD: [&'static str; 9] = [
        "rnnt-paired",
        "rnnt-mixed",
        "las-paired",
        "las-mixed",
        "las-jatd",
        "delib-paired",
        "delib-mixed",
        "delib-jatd-partial",
        "delib-jatd-full",
    ];
}

impl FromStr for Row {
    type Err = Error;

    fn from_str(s: &str) -> Result<Row> {
        use DataMix::*;
        let system = match s {
            "rnnt-paired" => System::Rnnt(Paired),
            "rnnt-mixed" => System::Rnnt(Mixed),
            "las-paired" => System::Second(Variant::Las, Paired),
            "las-mixed" => System::Second(Variant::Las, Mixed),
            "las-jatd" => System::Second(Variant::LasJatd, Mixed),
            "delib-paired" => System::Second(Variant::Deliberation, Paired),
            "delib-mixed" => System::Second(Variant::Deliberation, Mixed),
            "delib-jatd-partial" => System::Second(Variant::DelibJatdPartial, Mixed),
            "delib-jatd-full" => System::Second(Variant::DelibJatdFull, Mixed),
            _ => {
                return Err(Error::Config(format!(
                    "unknown row {s:?}; expected one of {}",
                    Row::STANDARD.join(", ")
                )))
            }
        };
        Ok(Row {
            name: s.to_string(),
            system,
        })
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub seeds: Vec<u64>,
    pub threads: usize,
    /// Win and loss samples kept per row and test set.
    pub samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            seeds: vec![1, 2, 3],
            threads: 1,
            samples: 3,
        }
    }
}

pub const TEST_SETS: [&str; 3] = ["vs_like", "rare_tts", "rare_spoken"];

pub(crate) fn test_sets(corpus: &Corpus) -> [(&'static str, &[Example]); 3] {
    [
        (TEST_SETS[0], &corpus.tests.vs_like),
        (TEST_SETS[1], &corpus.tests.rare_tts),
        (TEST_SETS[2], &corpus.tests.rare_spoken),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub lambda: f64,
    pub dev_wer: Vec<(f64, f64)>,
    pub sets: BTreeMap<String, SetResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: Row,
    pub seeds: Vec<SeedResult>,
    /// Mean WER across seeds per test set.
    pub mean_wer: BTreeMap<String, f64>,
}

impl RowResult {
    pub fn mean(&self, set: &str) -> f64 {
        self.mean_wer.get(set).copied().unwrap_or(f64::NAN)
    }

    /// Mean over the two rare-word sets.
    pub fn rare_mean(&self) -> f64 {
        (self.mean(TEST_SETS[1]) + self.mean(TEST_SETS[2])) / 2.0
    }
}

/// An utterance one row gets right and the other does not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub row: String,
    pub set: String,
    pub id: String,
    pub win: bool,
    pub reference: Vec<usize>,
    pub row_hypothesis: Vec<usize>,
    pub baseline_hypothesis: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<RowResult>,
    pub baseline: Option<String>,
    pub samples: Vec<Sample>,
}

impl Report {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.name == name)
    }

    /// Table of mean WER (percent) with one line per row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<20}", "row");
        for set in TEST_SETS {
            let _ = write!(s, "{set:>12}");
        }
        let _ = writeln!(s, "{:>10}", "lambda");
        for r in &self.rows {
            let _ = write!(s, "{:<20}", r.row.name);
            for set in TEST_SETS {
                let _ = write!(s, "{:>12.2}", 100.0 * r.mean(set));
            }
            let lambdas: Vec<String> = r.seeds.iter().map(|x| format!("{}", x.lambda)).collect();
            let _ = writeln!(s, "  {}", lambdas.join("/"));
        }
        s
    }

    /// Sample wins and losses with token alignments.
    pub fn samples_text(&self, vocab: &crate::corpus::Vocab) -> String {
        let mut s = String::new();
        for x in &self.samples {
            let _ = writeln!(
                s,
                "[{}] {} {} {}\n  ref:  {}\n  row:  {}\n  base: {}",
                if x.win { "win" } else { "loss" },
                x.row,
                x.set,
                x.id,
                vocab.render(&x.reference),
                vocab.render(&x.row_hypothesis),
                vocab.render(&x.baseline_hypothesis),
            );
        }
        s
    }
}

fn mean_wer(seeds: &[SeedResult]) -> BTreeMap<String, f64> {
    TEST_SETS
        .iter()
        .map(|&set| {
            let sum: f64 = seeds.iter().map(|s| s.sets[set].wer).sum();
            (set.to_string(), sum / seeds.len() as f64)
        })
        .collect()
}

/// Utterances from one set where exactly one of two decodes is error-free.
pub fn win_loss(row: &str, set: &str, a: &SetResult, b: &SetResult, limit: usize) -> Vec<Sample> {
    let (mut wins, mut losses) = (0, 0);
    let mut out = Vec::new();
    for (u, v) in a.utterances.iter().zip(&b.utterances) {
        let (ea, eb) = (u.counts.errors(), v.counts.errors());
        let win = ea == 0 && eb > 0;
        let loss = ea > 0 && eb == 0;
        let keep = if win { wins < limit } else { loss && losses < limit };
        if !keep {
            continue;
        }
        if win {
            wins += 1;
        } else {
            losses += 1;
        }
        out.push(Sample {
            row: row.to_string(),
            set: set.to_string(),
            id: u.id.clone(),
            win,
            reference: u.reference.clone(),
            row_hypothesis: u.hypothesis.clone(),
            baseline_hypothesis: v.hypothesis.clone(),
        });
    }
    out
}

fn samples(row: &RowResult, base: &RowResult, limit: usize) -> Vec<Sample> {
    let (Some(a), Some(b)) = (row.seeds.first(), base.seeds.first()) else {
        return Vec::new();
    };
    TEST_SETS
        .iter()
        .flat_map(|&set| win_loss(&row.row.name, set, &a.sets[set], &b.sets[set], limit))
        .collect()
}

/// Progress events from [`run_experiment_matrix`].
#[derive(Clone, Debug)]
pub enum Progress<'a> {
    Pretrain { seed: u64, mix: DataMix },
    Train { seed: u64, row: &'a str },
    Evaluated { seed: u64, row: &'a str, result: &'a SeedResult },
}

/// Trains and evaluates every row for every seed. Second-pass rows start
/// from the transducer pretrained on paired data for that seed. The first
/// row serves as the baseline for win/loss samples.
pub fn run_experiment_matrix(
    corpus: &Corpus,
    rows: &[Row],
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<Report> {
    if rows.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one row and one seed".into()));
    }
    cfg.decode.validate()?;
    cfg.train.validate()?;
    let mut results: Vec<Vec<SeedResult>> = vec![Vec::new(); rows.len()];
    for &seed in &cfg.seeds {
        let mut pretrained = BTreeMap::new();
        for mix in [DataMix::Paired, DataMix::Mixed] {
            let needed = rows.iter().any(|r| match r.system {
                System::Rnnt(m) => m == mix,
                System::Second(..) => mix == DataMix::Paired,
            });
            if !needed {
                continue;
            }
            progress(Progress::Pretrain { seed, mix });
            let mc = ModelConfig {
                seed,
                ..cfg.model.clone()
            };
            let (mut store, first) = first_pass_only(&mc)?;
            let mut data = corpus.paired.clone();
            if mix == DataMix::Mixed {
                data.extend(corpus.unpaired.iter().cloned());
            }
            pretrain_first_pass(&mut store, &first, &data, &cfg.train, seed, |_| Ok(()))?;
            pretrained.insert(mix, (store, first));
        }
        for (i, row) in rows.iter().enumerate() {
            progress(Progress::Train { seed, row: &row.name });
            let mut sets = BTreeMap::new();
            let (lambda, dev_wer) = match row.system {
                System::Rnnt(mix) => {
                    let (store, first) = &pretrained[&mix];
                    for (name, ex) in test_sets(corpus) {
                        let r = evaluate_first_pass(store, first, ex, cfg.decode.beam1, cfg.threads)?;
                        sets.insert(name.to_string(), r);
                    }
                    (1.0, Vec::new())
                }
                System::Second(variant, mix) => {
                    let mut model = Model::new(ModelConfig {
                        seed,
                        variant,
                        ..cfg.model.clone()
                    })?;
                    model.load_first_pass(&pretrained[&DataMix::Paired].0)?;
                    let tc = TrainConfig {
                        data: mix,
                        ..cfg.train.clone()
                    };
                    let mut trainer = Trainer::new(model, corpus, tc)?;
                    trainer.run(None, |_| Ok(()))?;
                    let model = trainer.model;
                    let sel = select_lambda(&model, &corpus.tests.dev, &cfg.decode, cfg.threads)?;
                    for (name, ex) in test_sets(corpus) {
                        let r = evaluate_two_pass(&model, ex, &cfg.decode, sel.lambda, cfg.threads)?;
                        sets.insert(name.to_string(), r);
                    }
                    (sel.lambda, sel.dev_wer)
                }
            };
            let result = SeedResult {
                seed,
                lambda,
                dev_wer,
                sets,
            };
            progress(Progress::Evaluated {
                seed,
                row: &row.name,
                result: &result,
            });
            results[i].push(result);
        }
    }
    let rows: Vec<RowResult> = rows
        .iter()
        .zip(results)
        .map(|(row, seeds)| RowResult {
            row: row.clone(),
            mean_wer: mean_wer(&seeds),
            seeds,
        })
        .collect();
    let samples = rows[1..]
        .iter()
        .flat_map(|r| samples(r, &rows[0], cfg.samples))
        .collect();
    Ok(Report {
        baseline: Some(rows[0].row.name.clone()),
        rows,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;

    #[test]
    fn perfect_decode_is_a_win() {
        use crate::eval::Utterance;
        let set = |hyp: Vec<usize>| {
            let counts = crate::eval::count_errors(&[2, 3], &hyp);
            SetResult {
                wer: counts.wer().unwrap(),
                counts,
                utterances: vec![Utterance {
                    id: "u".into(),
                    reference: vec![2, 3],
                    hypothesis: hyp,
                    counts,
                }],
            }
        };
        let (good, bad) = (set(vec![2, 3]), set(vec![2]));
        let w = win_loss("a", "vs_like", &good, &bad, 5);
        assert!(w.len() == 1 && w[0].win);
        let l = win_loss("a", "vs_like", &bad, &good, 5);
        assert!(l.len() == 1 && !l[0].win);
        assert!(win_loss("a", "vs_like", &good, &good, 5).is_empty());
    }

    #[test]
    fn standard_rows_parse() {
        for name in Row::STANDARD {
            assert_eq!(name.parse::<Row>().unwrap().name, name);
        }
        assert!("delib-jatd-half".parse::<Row>().is_err());
    }

    #[test]
    fn tiny_matrix_has_one_row_per_request() {
        let corpus = Corpus::build(&CorpusConfig {
            num_paired: 54,
            num_unpaired: 6,
            test_size: 4,
            dev_size: 3,
            min_rare_occurrences: 1,
            ..CorpusConfig::default()
        })
        .unwrap();
        let mut cfg = ExperimentConfig {
            seeds: vec![5],
            ..ExperimentConfig::default()
        };
        cfg.train.pretrain_steps = 2;
        cfg.train.steps = 2;
        cfg.train.batch_size = 2;
        let rows: Vec<Row> = ["delib-paired", "rnnt-paired", "delib-jatd-full"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let report = run_experiment_matrix(&corpus, &rows, &cfg, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 3);
        for (r, want) in report.rows.iter().zip(&rows) {
            assert_eq!(&r.row, want);
            assert!(TEST_SETS.iter().all(|s| r.mean(s).is_finite()));
        }
        assert_eq!(report.row("rnnt-paired").unwrap().seeds[0].lambda, 1.0);
        assert!(cfg.decode.lambda_grid.contains(&report.row("delib-jatd-full").unwrap().seeds[0].lambda));
        let table = report.table();
        assert_eq!(table.lines().count(), 4);
    }
}
