//! Command-line front end: parameter tables, gradient certification,
//! training, evaluation and the ECA kernel-size table.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 expectation mismatch, 4 numeric abort during training.

pub mod run_config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use attnet::attention::eca_kernel_size;
use attnet::certify::{attention_suite, layer_suite, model_suite, CaseResult, Fault};
use attnet::data_io::DatasetBatch;
use attnet::models::{count_params, init_params, load_checkpoint, save_checkpoint, Model, ModelSpec};
use attnet::train_eval::{evaluate, fit, log_line, Metrics, TrainConfig, LOG_HEADER};
use attnet::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use run_config::{DataConfig, DatasetKind, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "attnet", version, about = "Attention-augmented CNNs with verified gradients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the exact parameter count of a model.
    Params(ParamsArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a model and write its log, checkpoint and summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the ECA kernel size for each channel count.
    EcaTable(EcaArgs),
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// vgg, resnet or resnetv2.
    #[arg(long)]
    pub family: String,
    #[arg(long)]
    pub depth: usize,
    /// none, se, eca or cbam.
    #[arg(long, default_value = "none")]
    pub attention: String,
    /// Reduction ratio of the attention MLP.
    #[arg(long, default_value_t = 16)]
    pub r: usize,
    /// VGG attention placement: m1, m2 or m3.
    #[arg(long, default_value = "m2")]
    pub integration: String,
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
    /// Per-sample input as CxHxW.
    #[arg(long, default_value = "3x80x80")]
    pub input: String,
    /// Expected count in millions, e.g. 23.49 or 23.49M.
    #[arg(long)]
    pub expect: Option<String>,
    /// Allowed deviation from --expect, in percent.
    #[arg(long, default_value_t = 1.0)]
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Layers,
    Attention,
    Model,
    All,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(value_enum)]
    pub scope: Scope,
    /// First of the consecutive seeds each case is checked on.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale every backward pass by this factor (self-test of the checker).
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the dataset's native image size.
    #[arg(long)]
    pub no_resize: bool,
}

impl RunArgs {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> attnet::Result<RunConfig> {
        let mut overrides = self.set.clone();
        let flags = [
            ("dataset", self.dataset.clone()),
            ("data_path", self.data_path.as_ref().map(|p| p.display().to_string())),
            ("attention", self.attention.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("no_resize", self.no_resize.then(|| "true".to_string())),
        ];
        for (key, value) in flags.iter().chain(extra) {
            if let Some(v) = value {
                overrides.push(format!("{key}={v}"));
            }
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Independent runs with seeds seed, seed+1, ...; the summary reports the best.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Output directory.
    #[arg(long, default_value = "attnet-run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EcaArgs {
    /// Channel counts.
    #[arg(required = true, allow_negative_numbers = true)]
    pub channels: Vec<i64>,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    /// Use this kernel size for every channel count.
    #[arg(long)]
    pub fixed_k: Option<usize>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::TrainingDiverged { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Params(a) => cmd_params(a, out, err),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::EcaTable(a) => cmd_eca_table(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

type CmdResult = attnet::Result<i32>;

fn io_err(e: std::io::Error) -> Error {
    Error::io(Path::new("<output>"), e)
}

pub const PARAMS_HEADER: &str = "family\tdepth\tattention\tparams\tmillions";

/// One row of the `params` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsRow {
    pub family: String,
    pub depth: usize,
    pub attention: String,
    pub params: usize,
}

impl ParamsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.2}",
            self.family,
            self.depth,
            self.attention,
            self.params,
            self.params as f64 / 1e6
        )
    }

    /// Parses a line written by [`ParamsRow::to_line`].
    pub fn parse(line: &str) -> attnet::Result<Self> {
        let bad = || Error::Parse {
            row: 0,
            msg: format!("bad params row '{line}'"),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            family: f[0].to_string(),
            depth: f[1].parse().map_err(|_| bad())?,
            attention: f[2].to_string(),
            params: f[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Parses an expectation such as `23.49` or `23.49M` into millions.
pub fn parse_expect(s: &str) -> attnet::Result<f64> {
    let v = s.trim().trim_end_matches(['M', 'm']);
    match v.parse::<f64>() {
        Ok(m) if m > 0.0 && m.is_finite() => Ok(m),
        _ => Err(Error::Config(format!("bad expectation '{s}'"))),
    }
}

/// Whether `params` lies within `tol_pct` percent of `expect_millions`.
pub fn meets_expectation(params: usize, expect_millions: f64, tol_pct: f64) -> bool {
    let target = expect_millions * 1e6;
    ((params as f64 - target) / target).abs() * 100.0 <= tol_pct
}

fn cmd_params(a: &ParamsArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let expect = a.expect.as_deref().map(parse_expect).transpose()?;
    if a.tol.is_nan() || a.tol < 0.0 {
        return Err(Error::Config(format!("tolerance must be non-negative, got {}", a.tol)));
    }
    let mut spec = ModelSpec::new(a.family.parse()?, a.depth);
    let settings = [
        ("attention", a.attention.clone()),
        ("r", a.r.to_string()),
        ("integration", a.integration.clone()),
        ("classes", a.classes.to_string()),
        ("input", a.input.clone()),
    ];
    for (k, v) in &settings {
        spec.set(k, v)?;
    }
    let model = Model::build(&spec)?;
    let row = ParamsRow {
        family: spec.family.to_string(),
        depth: spec.depth,
        attention: spec.attention.kind.to_string(),
        params: count_params(&model),
    };
    writeln!(out, "{PARAMS_HEADER}\n{}", row.to_line()).map_err(io_err)?;
    if let Some(m) = expect {
        if !meets_expectation(row.params, m, a.tol) {
            let dev = (row.params as f64 / (m * 1e6) - 1.0) * 100.0;
            let _ = writeln!(err, "expected {m}M within {}%, got {} ({dev:+.3}%)", a.tol, row.params);
            return Ok(EXIT_MISMATCH);
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    let fault = Fault(a.inject_fault);
    let mut results: Vec<CaseResult> = Vec::new();
    if matches!(a.scope, Scope::Layers | Scope::All) {
        results.extend(layer_suite(a.seed, fault));
    }
    if matches!(a.scope, Scope::Attention | Scope::All) {
        results.extend(attention_suite(a.seed, fault));
    }
    if matches!(a.scope, Scope::Model | Scope::All) {
        results.extend(model_suite(a.seed, fault));
    }
    let mut passed = 0;
    for r in &results {
        writeln!(out, "{}\t{}", r.name, r.report).map_err(io_err)?;
        passed += usize::from(r.report.passed);
    }
    // failures rank first, then the largest error relative to tolerance
    let rank = |r: &CaseResult| (!r.report.passed, r.report.max_rel_err / r.report.tol);
    if let Some(w) = results.iter().max_by(|x, y| rank(x).partial_cmp(&rank(y)).unwrap_or(std::cmp::Ordering::Equal)) {
        writeln!(out, "worst\t{}\t{}", w.name, w.report).map_err(io_err)?;
    }
    writeln!(out, "passed {passed}/{} cases", results.len()).map_err(io_err)?;
    Ok(if passed == results.len() { EXIT_OK } else { EXIT_VERIFY })
}

/// `{"acc": 0.123456, "runs": 3}`: keys sorted, floats with 6 decimals.
pub fn summary_line(acc: f64, runs: usize) -> String {
    format!("{{\"acc\": {acc:.6}, \"runs\": {runs}}}")
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub initial: Metrics,
    pub history: Vec<Metrics>,
    /// Inference-mode metrics after training, on the validation set when
    /// there is one and otherwise on the training set.
    pub final_eval: Metrics,
    pub model: Model,
}

/// Builds, initialises (from `cfg.seed`) and trains one model. `on_epoch`
/// receives each log line.
pub fn train_once(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train: &DatasetBatch,
    val: Option<&DatasetBatch>,
    mut on_epoch: impl FnMut(&str),
) -> attnet::Result<RunOutcome> {
    let mut model = Model::build(spec)?;
    init_params(&mut model, cfg.seed);
    let initial = evaluate(&mut model, train, cfg.batch_size)?;
    let history = fit(&mut model, train, val, cfg, |e, m, v| on_epoch(&log_line(e, m, v)))?;
    let final_eval = evaluate(&mut model, val.unwrap_or(train), cfg.batch_size)?;
    Ok(RunOutcome {
        initial,
        history,
        final_eval,
        model,
    })
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let extra = [
        ("epochs", a.epochs.map(|e| e.to_string())),
        ("lr", a.lr.map(|l| l.to_string())),
    ];
    let mut cfg = a.run.resolve(&extra)?;
    if a.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let (train, val) = cfg.data.load(&mut cfg.model)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let text = cfg.to_text();
    write_file(&a.out.join("config.txt"), text.as_bytes())?;
    write!(out, "{text}").map_err(io_err)?;

    writeln!(out, "run\tseed\tinitial_loss\tfinal_loss\tacc").map_err(io_err)?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..a.repeats {
        let run_cfg = TrainConfig {
            seed: cfg.train.seed.wrapping_add(i as u64),
            ..cfg.train.clone()
        };
        let dir = a.out.join(format!("run{}", i + 1));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut log = vec![LOG_HEADER.to_string()];
        let outcome = train_once(&cfg.model, &run_cfg, &train, val.as_ref(), |line| {
            let _ = writeln!(err, "run {} {line}", i + 1);
            log.push(line.to_string());
        });
        write_file(&dir.join("train.log"), (log.join("\n") + "\n").as_bytes())?;
        let outcome = outcome?;
        save_checkpoint(&outcome.model, &dir.join("model.ckpt"))?;
        let last = outcome.history.last().map_or(outcome.initial.loss, |m| m.loss);
        writeln!(
            out,
            "{}\t{}\t{:.6}\t{last:.6}\t{:.6}",
            i + 1,
            run_cfg.seed,
            outcome.initial.loss,
            outcome.final_eval.accuracy
        )
        .map_err(io_err)?;
        best = best.max(outcome.final_eval.accuracy);
    }
    let summary = summary_line(best, a.repeats);
    write_file(&a.out.join("summary.json"), (summary.clone() + "\n").as_bytes())?;
    writeln!(out, "{summary}").map_err(io_err)?;
    Ok(EXIT_OK)
}

fn write_file(path: &Path, bytes: &[u8]) -> attnet::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.run.resolve(&[])?;
    let mut model = load_checkpoint(&a.checkpoint)?;
    let mut spec = model.spec().clone();
    let (train, val) = cfg.data.load(&mut spec)?;
    if spec.input != model.spec().input {
        return Err(Error::Config(format!(
            "dataset images are {}x{} but the checkpoint expects {}x{}",
            spec.input.h,
            spec.input.w,
            model.spec().input.h,
            model.spec().input.w
        )));
    }
    // an explicit validation split is what eval is for; otherwise the main set
    let data = val.unwrap_or(train);
    let m = evaluate(&mut model, &data, cfg.train.batch_size)?;
    writeln!(out, "samples\t{}\nloss\t{:.6}\nacc\t{:.6}", data.len(), m.loss, m.accuracy).map_err(io_err)?;
    writeln!(out, "class\tname\tcorrect\ttotal\tacc").map_err(io_err)?;
    for (k, name) in data.class_names.iter().enumerate() {
        writeln!(
            out,
            "{k}\t{name}\t{}\t{}\t{:.6}",
            m.per_class_correct[k], m.per_class_total[k], m.per_class_accuracy[k]
        )
        .map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

fn cmd_eca_table(a: &EcaArgs, out: &mut dyn Write) -> CmdResult {
    if let Some(&c) = a.channels.iter().find(|&&c| c < 1) {
        return Err(Error::Config(format!("channel count must be at least 1, got {c}")));
    }
    if let Some(k) = a.fixed_k {
        if k == 0 || k % 2 == 0 {
            return Err(Error::BadKernel(k));
        }
    }
    writeln!(out, "channels\tk").map_err(io_err)?;
    for &c in &a.channels {
        let k = match a.fixed_k {
            Some(k) => k,
            None => eca_kernel_size(c as usize, a.gamma, a.b)?,
        };
        writeln!(out, "{c}\t{k}").map_err(io_err)?;
    }
    Ok(EXIT_OK)
}
