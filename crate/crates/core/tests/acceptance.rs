//! End-to-end acceptance checks. Every test prints one `criterion N` line
//! with PASS or FAIL straight to stderr, so the verdicts show up in the
//! test log even when output capture is on.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;

use djtd::autodiff::{Gate, ParamStore, Tape, Tensor};
use djtd::corpus::{Corpus, CorpusConfig};
use djtd::delib::{interpolate, Variant};
use djtd::eval::experiment::Progress;
use djtd::eval::{apply_script, align, count_errors, run_experiment_matrix, two_pass_decode, wer, DecodeConfig, ExperimentConfig, Row};
use djtd::rng;
use djtd::rnnt::rnnt_nll;
use djtd::verify::{
    beam_vs_brute_force, first_pass_scores_by_width, gating_steps, lm_branch_outputs, random_features,
    random_lattice_instance, shared_weight_pair, whole_model_gradcheck, GRADCHECK_VARIANTS,
};

fn verdict(n: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!(
        "criterion {n} {name}: {} ({})\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

/// Sum over every alignment path, by plain recursion in probability space.
fn path_sum(lp: &Tensor, frames: usize, labels: &[usize], t: usize, u: usize) -> f64 {
    let u1 = labels.len() + 1;
    let row = t * u1 + u;
    let blank = lp.at(row, 0).exp();
    if t == frames - 1 && u == labels.len() {
        return blank;
    }
    let mut total = 0.0;
    if t + 1 < frames {
        total += blank * path_sum(lp, frames, labels, t + 1, u);
    }
    if u < labels.len() {
        total += lp.at(row, labels[u]).exp() * path_sum(lp, frames, labels, t, u + 1);
    }
    total
}

#[test]
fn criterion_1_transducer_loss_matches_enumeration() {
    let start = Instant::now();
    let mut r = rng::stream(2024, 1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (lp, frames, labels) = random_lattice_instance(&mut r);
        let tape = Tape::inference();
        let nll = rnnt_nll(tape.constant(lp.clone()), frames, &labels).unwrap().value().item();
        let oracle = -path_sum(&lp, frames, &labels, 0, 0).ln();
        worst = worst.max((nll - oracle).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "rnnt loss oracle",
        worst <= 1e-6 && elapsed < Duration::from_secs(60),
        format!("200 instances, max abs err {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_whole_model_gradient_check() {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for v in GRADCHECK_VARIANTS {
        let rep = whole_model_gradcheck(v, 11).unwrap();
        ok &= rep.pass_fraction() >= 0.99;
        parts.push(format!("{v} {:.4} of {}", rep.pass_fraction(), rep.checked));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    verdict(2, "gradient check", ok, format!("{}, {:.1}s", parts.join(", "), elapsed.as_secs_f64()));
}

fn same(a: &ParamStore, b: &ParamStore, gate: Gate) -> bool {
    a.snapshot(gate).iter().zip(&b.snapshot(gate)).all(|(x, y)| x.bit_eq(y))
}

#[test]
fn criterion_3_gradient_gating_is_exact() {
    let mut failures = Vec::new();
    for v in [Variant::DelibJatdFull, Variant::DelibJatdPartial, Variant::LasJatd] {
        let [(u0, u1), (p0, p1)] = gating_steps(v, 5).unwrap();
        for g in [Gate::EncoderStack, Gate::EncoderAttention] {
            if u0.snapshot(g).is_empty() || !same(&u0, &u1, g) {
                failures.push(format!("{v}: unpaired step moved {g}"));
            }
        }
        for g in [Gate::FixedContextE, Gate::FixedContextB] {
            if !same(&p0, &p1, g) {
                failures.push(format!("{v}: paired step moved {g}"));
            }
        }
        if same(&u0, &u1, Gate::SecondPassDecoder) || same(&p0, &p1, Gate::SecondPassDecoder) {
            failures.push(format!("{v}: decoder did not move"));
        }
        if same(&u0, &u1, Gate::FixedContextE) {
            failures.push(format!("{v}: unpaired step left the fixed context unchanged"));
        }
    }
    verdict(3, "gating", failures.is_empty(), if failures.is_empty() { "3 variants, bitwise".into() } else { failures.join("; ") });
}

#[test]
fn criterion_4_interpolation_identities() {
    let mut r = rng::stream(7, 4);
    let mut ok = true;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..30);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-20.0..0.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-20.0..0.0)).collect();
        ok &= interpolate(&a, &b, 1.0).unwrap() == a;
        ok &= interpolate(&a, &b, 0.0).unwrap() == b;
        let l: f64 = r.random();
        for (i, c) in interpolate(&a, &b, l).unwrap().into_iter().enumerate() {
            let want = l * a[i] + (1.0 - l) * b[i];
            worst = worst.max((c - want).abs() / want.abs().max(1.0));
        }
    }
    ok &= worst <= 4.0 * f64::EPSILON;
    let mut same_decodes = 0;
    for seed in 0..10 {
        let (full, plain) = shared_weight_pair(seed, 8).unwrap();
        let x = random_features(&mut r, 6, 4);
        let cfg = DecodeConfig::default();
        if two_pass_decode(&full, &x, &cfg, 1.0).unwrap() == two_pass_decode(&plain, &x, &cfg, 1.0).unwrap() {
            same_decodes += 1;
        }
    }
    ok &= same_decodes == 10;
    verdict(
        4,
        "interpolation",
        ok,
        format!("endpoints exact, max rel err {worst:.1e}, full at lambda 1 equals deliberation on {same_decodes}/10"),
    );
}

#[test]
fn criterion_5_full_text_branch_ignores_audio() {
    let (full, _) = shared_weight_pair(3, 8).unwrap();
    let outs = lm_branch_outputs(&full, 3, 10).unwrap();
    let full_identical = outs.iter().all(|o| o.bit_eq(&outs[0]));
    let mut partial = djtd::model::Model::new(djtd::verify::tiny_config(Variant::DelibJatdPartial, 3, 8)).unwrap();
    djtd::verify::randomize_fixed_contexts(&mut partial, &mut rng::stream(3, 5));
    let outs = lm_branch_outputs(&partial, 3, 10).unwrap();
    let partial_varies = outs.iter().any(|o| !o.bit_eq(&outs[0]));
    verdict(
        5,
        "text branch independence",
        full_identical && partial_varies,
        format!("full identical across 10 inputs: {full_identical}, partial varies: {partial_varies}"),
    );
}

#[test]
fn criterion_6_beam_matches_brute_force() {
    let mut agree = 0;
    let mut monotone = 0;
    for i in 0..50u64 {
        let seed = rng::derive_seed(606, i);
        let lambda = [1.0, 0.5, 0.1, 0.0][(i % 4) as usize];
        let ((bt, bs), (ot, os)) = beam_vs_brute_force(seed, lambda).unwrap();
        if bt == ot && (bs - os).abs() <= 1e-9 {
            agree += 1;
        }
        let scores = first_pass_scores_by_width(seed, 6).unwrap();
        if scores.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
    }
    verdict(
        6,
        "beam vs brute force",
        agree == 50 && monotone == 50,
        format!("{agree}/50 argmax agree, {monotone}/50 first-pass monotone in width"),
    );
}

#[test]
fn criterion_7_directional_table() {
    let start = Instant::now();
    let corpus = Corpus::build(&CorpusConfig::default()).unwrap();
    let rows: Vec<Row> = ["delib-paired", "delib-mixed", "delib-jatd-full"]
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    let cfg = ExperimentConfig::default();
    let report = run_experiment_matrix(&corpus, &rows, &cfg, |p| {
        if let Progress::Evaluated { seed, row, result } = p {
            let wers: Vec<String> = result.sets.iter().map(|(k, v)| format!("{k} {:.2}", 100.0 * v.wer)).collect();
            let _ = writeln!(std::io::stderr(), "  seed {seed} {row}: lambda {} {}", result.lambda, wers.join(" "));
        }
    })
    .unwrap();
    let elapsed = start.elapsed();
    let _ = std::io::stderr().write_all(report.table().as_bytes());
    let (paired, mixed, full) = (
        report.row("delib-paired").unwrap(),
        report.row("delib-mixed").unwrap(),
        report.row("delib-jatd-full").unwrap(),
    );
    let a = full.mean("rare_tts") < paired.mean("rare_tts") && full.mean("rare_spoken") < paired.mean("rare_spoken");
    let b = full.rare_mean() <= mixed.rare_mean();
    let c = full.mean("vs_like") <= 1.05 * paired.mean("vs_like");
    let budget = elapsed < Duration::from_secs(30 * 60);
    let detail = format!(
        "a {} (tts {:.2} vs {:.2}, spoken {:.2} vs {:.2}); b {} (rare {:.2} vs {:.2}); c {} (vs_like {:.2} vs limit {:.2}); {:.0}s",
        a,
        100.0 * full.mean("rare_tts"),
        100.0 * paired.mean("rare_tts"),
        100.0 * full.mean("rare_spoken"),
        100.0 * paired.mean("rare_spoken"),
        b,
        100.0 * full.rare_mean(),
        100.0 * mixed.rare_mean(),
        c,
        100.0 * full.mean("vs_like"),
        105.0 * paired.mean("vs_like"),
        elapsed.as_secs_f64()
    );
    verdict(7, "directional reproduction", a && b && c && budget, detail);
}

/// Plain Levenshtein distance, independent of the aligner.
fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn criterion_8_wer_arithmetic() {
    let mut ok = true;
    let refs = vec![vec![2, 3, 4], vec![2, 3, 4], vec![2, 3]];
    let hyps = vec![vec![2, 3, 4], vec![2, 9, 4], vec![]];
    let expect = [0.0, 1.0 / 3.0, 1.0];
    for i in 0..3 {
        let (w, _) = wer(&refs[i..=i], &hyps[i..=i]).unwrap();
        ok &= w == expect[i];
    }
    let mut r = rng::stream(88, 8);
    let mut matched = 0;
    for _ in 0..20 {
        let n = r.random_range(1..10);
        let m = r.random_range(0..10);
        let a: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        let b: Vec<usize> = (0..m).map(|_| r.random_range(0..5)).collect();
        let c = count_errors(&a, &b);
        let (w, _) = wer(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let d = edit_distance(&a, &b);
        if c.errors() == d
            && w == d as f64 / n as f64
            && c.ref_len == n
            && n - c.deletions + c.insertions == m
            && apply_script(&a, &b, &align(&a, &b)).as_deref() == Some(&b[..])
        {
            matched += 1;
        }
    }
    ok &= matched == 20;
    verdict(8, "wer arithmetic", ok, format!("3 hand cases, {matched}/20 random cases match the DP oracle"));
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_djtd"))
        .args(args)
        .env_remove("DJTD_SEED")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Every file in `dir` except the run manifest, which records wall-clock
/// times.
fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "run.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.json");
    fs::write(
        &config,
        r#"{"seed": 3,
            "corpus": {"num_paired": 90, "num_unpaired": 10, "test_size": 8, "dev_size": 4, "min_rare_occurrences": 2},
            "train": {"pretrain_steps": 20, "steps": 12, "batch_size": 4, "checkpoint_every": 5}}"#,
    )
    .unwrap();
    let c = config.to_str().unwrap();
    let mut ok = true;
    for run in ["a", "b"] {
        let corpus = root.join(format!("corpus_{run}"));
        let model = root.join(format!("model_{run}"));
        ok &= run_cli(&["gen-data", "--config", c, "--out", corpus.to_str().unwrap()]);
        ok &= run_cli(&[
            "train", "--config", c, "--corpus", corpus.to_str().unwrap(), "--out", model.to_str().unwrap(),
        ]);
    }
    let corpora = artifact_bytes(&root.join("corpus_a")) == artifact_bytes(&root.join("corpus_b"));
    let models = artifact_bytes(&root.join("model_a")) == artifact_bytes(&root.join("model_b"));
    let files = artifact_bytes(&root.join("model_a")).len();
    verdict(
        9,
        "determinism",
        ok && corpora && models && files >= 4,
        format!("corpora identical: {corpora}, checkpoints identical: {models} ({files} files)"),
    );
}
