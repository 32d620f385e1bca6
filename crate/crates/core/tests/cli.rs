use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_djtd");

const TINY: &str = r#"{
  "seed": 4,
  "corpus": {
    "num_paired": 24, "num_unpaired": 8, "test_size": 6, "dev_size": 3,
    "min_rare_occurrences": 1
  },
  "train": {
    "pretrain_steps": 3, "steps": 6, "batch_size": 2, "checkpoint_every": 2
  }
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DJTD_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    corpus: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let corpus = root.join("corpus");
    let o = run(&["gen-data", "--config", s(&config), "--out", s(&corpus)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Workspace {
        _dir: dir,
        root,
        config,
        corpus,
    }
}

fn train(w: &Workspace, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(&w.config), "--corpus", s(&w.corpus), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

fn checkpoint_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run.json")
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["config", "--config", "/nonexistent/cfg.json"])), 2);
    let o = Command::new(BIN).args(["config"]).env("DJTD_SEED", "abc").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let w = workspace();
    let seed_of = |o: Output| -> u64 {
        assert_eq!(code(&o), 0);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(run(&["config", "--config", s(&w.config)])), 4);
    let env = Command::new(BIN).args(["config", "--config", s(&w.config)]).env("DJTD_SEED", "9").output().unwrap();
    assert_eq!(seed_of(env), 9);
    let both = Command::new(BIN)
        .args(["config", "--config", s(&w.config), "--seed", "12"])
        .env("DJTD_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(seed_of(both), 12);
}

#[test]
fn gen_data_refuses_non_empty_output_without_force() {
    let w = workspace();
    let o = run(&["gen-data", "--config", s(&w.config), "--out", s(&w.corpus)]);
    assert_eq!(code(&o), 1);
    let o = run(&["gen-data", "--config", s(&w.config), "--out", s(&w.corpus), "--force"]);
    assert_eq!(code(&o), 0);
    assert!(w.corpus.join("run.json").is_file());
}

#[test]
fn interrupted_training_resumes_to_identical_checkpoint() {
    let w = workspace();
    let straight = w.root.join("straight");
    let o = train(&w, &straight, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let resumed = w.root.join("resumed");
    assert_eq!(code(&train(&w, &resumed, &["--stop-after", "3"])), 0);
    let o = train(&w, &resumed, &[]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("resuming at step 3"));

    // checkpoints land at step 2 and 3; the resume restarts from step 3
    assert_eq!(checkpoint_bytes(&straight), checkpoint_bytes(&resumed));
    for dir in [&straight, &resumed] {
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
        assert_eq!(manifest["command"], "train");
        assert_eq!(manifest["seed"], 4);
    }
}

#[test]
fn eval_writes_report_and_assert_improvement_rejects_a_tie() {
    let w = workspace();
    let model = w.root.join("model");
    assert_eq!(code(&train(&w, &model, &["--steps", "2"])), 0);
    let report = w.root.join("report.json");
    let o = run(&[
        "eval", "--config", s(&w.config), "--model", s(&model), "--corpus", s(&w.corpus),
        "--out", s(&report), "--lambda-grid", "0.5,1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("rare_tts") && text.contains("lambda"));

    // the same checkpoint cannot strictly improve on itself
    let o = run(&[
        "eval", "--config", s(&w.config), "--model", s(&model), "--corpus", s(&w.corpus),
        "--lambda-grid", "0.5,1", "--assert-improvement", s(&report),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not improve"));

    let o = run(&["eval", "--model", s(&model), "--corpus", s(&w.corpus), "--beam2", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_rejects_mismatched_corpus() {
    let w = workspace();
    let other = w.root.join("other.json");
    fs::write(&other, r#"{"corpus": {"num_rare": 4, "num_paired": 20, "num_unpaired": 6, "test_size": 4, "dev_size": 2, "min_rare_occurrences": 1}}"#).unwrap();
    let o = run(&["train", "--config", s(&other), "--corpus", s(&w.corpus), "--out", s(&w.root.join("x"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_single_suite_passes() {
    let o = run(&["verify", "--suite", "interp"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("pass interp"));
}
