use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use djtd::autodiff::{checkpoint, ParamStore};
use djtd::config::{unix_now, RunConfig, RunManifest};
use djtd::corpus::{self, io::DataFormat, Corpus};
use djtd::delib::Variant;
use djtd::eval::experiment::Progress;
use djtd::eval::{evaluate_model, run_experiment_matrix, EvalReport, ExperimentConfig, Row};
use djtd::model::{first_pass_only, Model, MODEL_JSON};
use djtd::train::{pretrain_first_pass, DataMix, MetricsLog, StepMetrics, Trainer, FIRST_PASS_BIN, STATE_JSON};
use djtd::verify::{self, Suite};

const METRICS: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "djtd", version, about = "Two-pass transducer + deliberation recognizer on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(GenDataArgs),
    /// Pretrain the first pass, then train a second-pass variant.
    Train(TrainArgs),
    /// Select lambda on dev and score every test set.
    Eval(EvalArgs),
    /// Run a built-in property suite.
    Verify(VerifyArgs),
    /// Train and evaluate several rows over several seeds.
    Matrix(MatrixArgs),
    /// Print the default configuration.
    Config(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config file and DJTD_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap for decoding.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "binary")]
    format: DataFormat,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    data: Option<MixArg>,
    #[arg(long)]
    lambda_train: Option<f64>,
    #[arg(long)]
    beam1: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    freeze_first_pass: Option<bool>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Model or first-pass directory to take the first pass from; skips
    /// pretraining.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Stop after this many second-pass steps (a later run resumes).
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
    /// Discard an existing run in `out` instead of resuming it.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    Paired,
    Mixed,
}

impl From<MixArg> for DataMix {
    fn from(m: MixArg) -> Self {
        match m {
            MixArg::Paired => DataMix::Paired,
            MixArg::Mixed => DataMix::Mixed,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    beam1: Option<usize>,
    #[arg(long)]
    beam2: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail unless the rare-set WER beats this earlier report.
    #[arg(long)]
    assert_improvement: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Gradcheck,
    RnntOracle,
    Gating,
    Interp,
    BeamOracle,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "delib-paired,delib-mixed,delib-jatd-full")]
    rows: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    lambda_train: Option<f64>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    force: bool,
}

enum Failure {
    Usage(String),
    Failed(String),
}

impl From<djtd::Error> for Failure {
    fn from(e: djtd::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Failed(format!("{}: {e}", path.display()))
}

fn load_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let base = match &common.config {
        Some(p) if !p.is_file() => {
            return Err(Failure::Usage(format!("config file {} not found", p.display())));
        }
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let mut cfg = base.resolve(common.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(t) = common.threads {
        cfg.threads = t.max(1);
    }
    Ok(cfg)
}

fn apply_decode(cfg: &mut RunConfig, d: &DecodeArgs) -> CliResult {
    if let Some(g) = &d.lambda_grid {
        cfg.decode.lambda_grid = g.clone();
    }
    if let Some(b) = d.beam1 {
        cfg.decode.beam1 = b;
    }
    if let Some(b) = d.beam2 {
        cfg.decode.beam2 = b;
    }
    if let Some(k) = d.top_k {
        cfg.decode.top_k = k;
    }
    cfg.decode.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_out(dir: &Path, force: bool) -> CliResult {
    if is_non_empty(dir) {
        if !force {
            return Err(Failure::Failed(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let started = unix_now();
    let cfg = load_config(&a.common)?;
    prepare_out(&a.out, a.force)?;
    let corpus = Corpus::build(&cfg.corpus)?;
    let manifest = corpus::io::save(&corpus, &a.out, a.format, true)?;
    RunManifest::new("gen-data", a.common.config.as_deref(), &cfg, started).write(&a.out)?;
    for s in &manifest.splits {
        println!("{:<16}{:>6}", s.name, s.count);
    }
    Ok(())
}

fn check_compatible(corpus: &Corpus, cfg: &RunConfig) -> CliResult {
    let v = corpus.vocab().size();
    if v != cfg.model.first_pass.vocab_size {
        return Err(Failure::Failed(format!(
            "corpus vocabulary has {v} tokens but the model expects {}",
            cfg.model.first_pass.vocab_size
        )));
    }
    let d = corpus.config.voice.feature_dim;
    if d != cfg.model.first_pass.feature_dim {
        return Err(Failure::Failed(format!(
            "corpus features have {d} dims but the model expects {}",
            cfg.model.first_pass.feature_dim
        )));
    }
    Ok(())
}

/// First pass from a directory holding either a pretrained first pass or a
/// full model.
fn first_pass_from(dir: &Path, cfg: &RunConfig) -> CliResult<ParamStore> {
    let fp = dir.join(FIRST_PASS_BIN);
    if fp.is_file() {
        let (mut store, _) = first_pass_only(&cfg.model)?;
        checkpoint::load_into(&mut store, &fp)?;
        return Ok(store);
    }
    if dir.join(MODEL_JSON).is_file() {
        return Ok(Model::load(dir)?.store);
    }
    Err(Failure::Failed(format!("{} holds no first pass or model", dir.display())))
}

/// Keeps pretraining lines and second-pass lines up to `step`.
fn trim_metrics(path: &Path, step: usize) -> CliResult {
    let Ok(f) = File::open(path) else {
        return Ok(());
    };
    let mut kept = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        match serde_json::from_str::<StepMetrics>(&line) {
            Ok(m) if m.stage == "pretrain" || m.step <= step => kept.push(line),
            _ => {}
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn train(a: TrainArgs) -> CliResult {
    let started = unix_now();
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(d) = a.data {
        cfg.train.data = d.into();
    }
    if let Some(l) = a.lambda_train {
        cfg.train.lambda_train = l;
    }
    if let Some(b) = a.beam1 {
        cfg.train.beam1 = b;
    }
    if let Some(k) = a.top_k {
        cfg.train.top_k = k;
    }
    if let Some(f) = a.freeze_first_pass {
        cfg.train.freeze_first_pass = f;
    }
    if let Some(s) = a.pretrain_steps {
        cfg.train.pretrain_steps = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let corpus = corpus::io::load(&a.corpus)?;
    check_compatible(&corpus, &cfg)?;
    let resuming = !a.force && a.out.join(STATE_JSON).is_file();
    if !resuming {
        prepare_out(&a.out, a.force)?;
    }
    let metrics_path = a.out.join(METRICS);
    if resuming {
        let text = fs::read_to_string(a.out.join(STATE_JSON)).map_err(|e| io_err(&a.out, e))?;
        let state: djtd::train::TrainState =
            serde_json::from_str(&text).map_err(|e| Failure::Failed(e.to_string()))?;
        trim_metrics(&metrics_path, state.step)?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let mut log = MetricsLog::new(BufWriter::new(file));

    let fp_path = a.out.join(FIRST_PASS_BIN);
    let first_store = if resuming && fp_path.is_file() {
        first_pass_from(&a.out, &cfg)?
    } else if let Some(init) = &a.init_from {
        let store = first_pass_from(init, &cfg)?;
        checkpoint::save(&store, &fp_path)?;
        store
    } else {
        let (mut store, first) = first_pass_only(&cfg.model)?;
        let paired = corpus.paired.clone();
        pretrain_first_pass(&mut store, &first, &paired, &cfg.train, cfg.seed, |m| {
            if m.step % 100 == 0 || m.step == cfg.train.pretrain_steps {
                log.log(m)?;
            }
            Ok(())
        })?;
        checkpoint::save(&store, &fp_path)?;
        store
    };

    let mut model = Model::new(cfg.model.clone())?;
    model.load_first_pass(&first_store)?;
    let mut trainer = Trainer::new(model, &corpus, cfg.train.clone())?;
    if resuming {
        trainer.resume(&a.out)?;
        eprintln!("resuming at step {}", trainer.step);
    }
    let limit = a.stop_after.unwrap_or(usize::MAX).min(cfg.train.steps);
    let every = cfg.train.checkpoint_every;
    while trainer.step < limit {
        let m = trainer.step_once()?;
        log.log(&m)?;
        if every > 0 && trainer.step % every == 0 {
            trainer.save(&a.out)?;
        }
    }
    trainer.save(&a.out)?;
    log.flush()?;
    RunManifest::new("train", a.common.config.as_deref(), &cfg, started).write(&a.out)?;
    println!("trained {} to step {} in {}", cfg.model.variant, trainer.step, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    apply_decode(&mut cfg, &a.decode)?;
    let model = Model::load(&a.model)?;
    let corpus = corpus::io::load(&a.corpus)?;
    if corpus.vocab().size() != model.config.first_pass.vocab_size {
        return Err(Failure::Failed("corpus and model vocabularies differ".into()));
    }
    let report = evaluate_model(&model, &corpus, &cfg.decode, cfg.threads, a.samples)?;
    print!("{}", report.table());
    print!("{}", samples_text(&report, &corpus));
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Failed(e.to_string()))?;
        fs::write(out, json).map_err(|e| io_err(out, e))?;
    }
    if let Some(base) = &a.assert_improvement {
        let text = fs::read_to_string(base).map_err(|e| io_err(base, e))?;
        let base: EvalReport = serde_json::from_str(&text).map_err(|e| Failure::Failed(e.to_string()))?;
        let (new, old) = (report.rare_wer(), base.rare_wer());
        if new.partial_cmp(&old) != Some(std::cmp::Ordering::Less) {
            return Err(Failure::Failed(format!(
                "rare-set WER {:.2}% does not improve on the baseline {:.2}%",
                100.0 * new,
                100.0 * old
            )));
        }
        println!("rare-set WER {:.2}% improves on {:.2}%", 100.0 * new, 100.0 * old);
    }
    Ok(())
}

fn samples_text(report: &EvalReport, corpus: &Corpus) -> String {
    let r = djtd::eval::Report {
        rows: Vec::new(),
        baseline: Some("first pass".into()),
        samples: report.samples.clone(),
    };
    r.samples_text(&corpus.vocab())
}

fn run_verify(a: VerifyArgs) -> CliResult {
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::All => Suite::ALL.to_vec(),
        SuiteArg::Gradcheck => vec![Suite::Gradcheck],
        SuiteArg::RnntOracle => vec![Suite::RnntOracle],
        SuiteArg::Gating => vec![Suite::Gating],
        SuiteArg::Interp => vec![Suite::Interp],
        SuiteArg::BeamOracle => vec![Suite::BeamOracle],
    };
    let mut failed = Vec::new();
    for s in suites {
        let rep = verify::run(s, a.seed)?;
        let status = if rep.passed() { "pass" } else { "FAIL" };
        println!("{status} {:<12} {} checks", s.name(), rep.checks);
        for f in &rep.failures {
            println!("    {f}");
        }
        if !rep.passed() {
            failed.push(s.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}

fn matrix(a: MatrixArgs) -> CliResult {
    let started = unix_now();
    let mut cfg = load_config(&a.common)?;
    apply_decode(&mut cfg, &a.decode)?;
    if let Some(l) = a.lambda_train {
        cfg.train.lambda_train = l;
    }
    if let Some(s) = a.pretrain_steps {
        cfg.train.pretrain_steps = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let rows: Vec<Row> = a
        .rows
        .iter()
        .map(|r| r.parse().map_err(|e: djtd::Error| Failure::Usage(e.to_string())))
        .collect::<CliResult<_>>()?;
    let corpus = corpus::io::load(&a.corpus)?;
    check_compatible(&corpus, &cfg)?;
    prepare_out(&a.out, a.force)?;
    let exp = ExperimentConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        decode: cfg.decode.clone(),
        seeds: a.seeds.clone(),
        threads: cfg.threads,
        samples: 3,
    };
    let report = run_experiment_matrix(&corpus, &rows, &exp, |p| match p {
        Progress::Pretrain { seed, mix } => eprintln!("seed {seed}: pretraining first pass ({mix:?})"),
        Progress::Train { seed, row } => eprintln!("seed {seed}: {row}"),
        Progress::Evaluated { row, result, .. } => {
            let wers: Vec<String> = result.sets.iter().map(|(k, v)| format!("{k} {:.2}", 100.0 * v.wer)).collect();
            eprintln!("    {row}: lambda {} {}", result.lambda, wers.join(" "));
        }
    })?;
    let table = report.table();
    print!("{table}");
    let write = |name: &str, text: String| -> CliResult {
        let p = a.out.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write("report.json", serde_json::to_string_pretty(&report).map_err(|e| Failure::Failed(e.to_string()))?)?;
    write("table.txt", table)?;
    write("samples.txt", report.samples_text(&corpus.vocab()))?;
    RunManifest::new("matrix", a.common.config.as_deref(), &cfg, started).write(&a.out)?;
    Ok(())
}

fn print_config(c: CommonArgs) -> CliResult {
    let cfg = load_config(&c)?;
    let json = serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Failed(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => run_verify(a),
        Command::Matrix(a) => matrix(a),
        Command::Config(a) => print_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
