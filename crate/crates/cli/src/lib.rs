//! `lightnet` command-line front end. [`run`] is the whole program so tests
//! can drive it in-process; `main` only wires it to the real streams.
//!
//! Exit codes: 0 success, 1 invalid input (flags, files, datasets), 2 runtime
//! failure (divergence, failed writes, failed self-checks).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lightnet::arch::{mobilenetv3_large_spec, parse_arch_file, resnet50_cost_spec, ArchSpec};
use lightnet::checkpoint::{
    checkpoint_load, checkpoint_save, read_run_record, write_run_record, RunRecord,
};
use lightnet::cost::{analyze, compare_last_stages, report_render, Convention, InputShape, ReportFormat};
use lightnet::data::{
    load_chip_dataset, split_by_depression, subsample_per_class, synth_sar_generate,
    write_chip_dataset, ChannelMode, Sample, TEST_DEPRESSION, TRAIN_DEPRESSION,
};
use lightnet::gradcheck::run_suite;
use lightnet::model::build_model;
use lightnet::sweep::{run_limited_data_sweep, SweepPlan};
use lightnet::train::{evaluate, train, LrSchedule, Precision, TrainConfig};
use lightnet::{Error, Scalar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const THREADS_ENV: &str = "LIGHTNET_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lightnet", version, about = "Lightweight CNN cost analysis and limited-data SAR recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and multiply-add report for an architecture.
    Analyze(AnalyzeArgs),
    /// Write a synthetic SAR-like chip dataset.
    Synth(SynthArgs),
    /// Train a network on a chip dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a chip dataset.
    Eval(EvalArgs),
    /// Train and evaluate across per-class budgets and seeds.
    Sweep(SweepArgs),
    /// Finite-difference gradient self-check of every op and block.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Architecture file, `builtin:mobilenetv3-large` or `builtin:resnet50`.
    #[arg(long, default_value = "builtin:mobilenetv3-large")]
    pub arch: String,
    /// Input shape as HxWxC; defaults to the architecture's own.
    #[arg(long)]
    pub input: Option<InputShape>,
    #[arg(long, default_value = "madds")]
    pub convention: Convention,
    #[arg(long, default_value = "table")]
    pub format: ReportFormat,
    /// Width multiplier for the builtin MobileNetV3-Large.
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    /// Class count for the builtin MobileNetV3-Large.
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    /// Append the original-versus-efficient last stage comparison.
    #[arg(long)]
    pub compare_last_stage: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Dataset root: `<class>/*.pgm` plus manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = TRAIN_DEPRESSION)]
    pub train_depression: f64,
    #[arg(long, default_value_t = TEST_DEPRESSION)]
    pub test_depression: f64,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value = "gray1")]
    pub channels: ChannelMode,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 4e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value = "cosine")]
    pub schedule: LrSchedule,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_schedule: self.schedule,
            seed,
            precision: self.precision,
            resolution: self.resolution,
            channel_mode: self.channels,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training samples per class; all when omitted.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Loss history CSV; defaults to `<checkpoint>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,60,80,100")]
    pub k_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Sweep CSV destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Concurrent training runs; capped by LIGHTNET_NUM_THREADS when set.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failure together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn invalid(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

/// Library errors raised while reading user input count as invalid input,
/// except for failures that can only come from running the computation.
fn classify(e: Error) -> Failure {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::NoForwardCache { .. } => {
            Failure::runtime(e)
        }
        _ => Failure::invalid(e),
    }
}

type CliResult = std::result::Result<(), Failure>;

pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes()).map_err(Failure::runtime)
}

fn resolve_arch(a: &AnalyzeArgs) -> std::result::Result<ArchSpec, Failure> {
    match a.arch.as_str() {
        "builtin:mobilenetv3-large" => {
            let channels = a.input.map_or(3, |i| i.channels);
            mobilenetv3_large_spec(channels, a.classes, a.width).map_err(classify)
        }
        "builtin:resnet50" => Ok(resnet50_cost_spec()),
        other if other.starts_with("builtin:") => Err(Failure::invalid(format!(
            "unknown builtin '{other}' (expected builtin:mobilenetv3-large or builtin:resnet50)"
        ))),
        path => parse_arch_file(path).map_err(classify),
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    let spec = resolve_arch(a)?;
    let input = a.input.unwrap_or_else(|| InputShape::of(&spec));
    let report = analyze(&spec, input, a.convention).map_err(classify)?;
    let mut text = report_render(&report, a.format);
    if a.compare_last_stage {
        let cmp = compare_last_stages(a.width, input.height).map_err(classify)?;
        text.push('\n');
        text.push_str(&cmp.to_string());
    }
    emit(out, &text)
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let data = synth_sar_generate(a.classes, a.train_per_class, a.test_per_class, a.resolution, a.seed)
        .map_err(classify)?;
    let all: Vec<Sample> = data.train.iter().chain(&data.test).cloned().collect();
    write_chip_dataset(&a.out, &data.manifest.classes, &all).map_err(Failure::runtime)?;
    emit(
        out,
        &format!(
            "wrote {} chips ({} train, {} test) in {} classes to {}\n",
            all.len(),
            data.train.len(),
            data.test.len(),
            a.classes,
            a.out.display()
        ),
    )
}

struct Splits {
    train: Vec<Sample>,
    test: Vec<Sample>,
    classes: Vec<String>,
}

fn load_splits(d: &DataArgs) -> std::result::Result<Splits, Failure> {
    let (samples, manifest) = load_chip_dataset(&d.data).map_err(classify)?;
    let (train, test) =
        split_by_depression(samples, d.train_depression, d.test_depression).map_err(classify)?;
    Ok(Splits {
        train,
        test,
        classes: manifest.classes,
    })
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let config = a.model.config(a.seed);
    config.validate().map_err(classify)?;
    let splits = load_splits(&a.data)?;
    let train_set = match a.per_class {
        Some(k) => subsample_per_class(&splits.train, k, a.seed).map_err(classify)?,
        None => splits.train,
    };
    let spec = mobilenetv3_large_spec(config.channel_mode.channels(), splits.classes.len(), a.model.width)
        .map_err(classify)?;
    let record = RunRecord {
        config: config.clone(),
        class_names: splits.classes,
        per_class: a.per_class,
    };
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut s = a.checkpoint.as_os_str().to_owned();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    match config.precision {
        Precision::F32 => train_and_save::<f32>(&spec, &train_set, &record, &a.checkpoint, &history_path, out),
        Precision::F64 => train_and_save::<f64>(&spec, &train_set, &record, &a.checkpoint, &history_path, out),
    }
}

fn train_and_save<T: Scalar>(
    spec: &ArchSpec,
    train_set: &[Sample],
    record: &RunRecord,
    checkpoint: &Path,
    history_path: &Path,
    out: &mut dyn Write,
) -> CliResult {
    let mut model = build_model::<T>(spec, record.config.seed).map_err(classify)?;
    let history = train(&mut model, train_set, &record.config).map_err(classify)?;
    checkpoint_save(&mut model, checkpoint).map_err(Failure::runtime)?;
    write_run_record(record, checkpoint).map_err(Failure::runtime)?;
    std::fs::write(history_path, history.to_csv())
        .map_err(|e| Failure::runtime(format!("{}: {e}", history_path.display())))?;
    let (loss, acc) = (
        history.loss.last().copied().unwrap_or(f64::NAN),
        history.train_accuracy.last().copied().unwrap_or(f64::NAN),
    );
    emit(
        out,
        &format!(
            "trained on {} samples for {} epochs: final loss {loss:.6}, train accuracy {:.2}%\ncheckpoint {}\nhistory {}\n",
            train_set.len(),
            record.config.epochs,
            acc * 100.0,
            checkpoint.display(),
            history_path.display()
        ),
    )
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let record = read_run_record(&a.checkpoint).map_err(classify)?;
    let splits = load_splits(&a.data)?;
    if splits.classes != record.class_names {
        return Err(Failure::invalid(format!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            splits.classes, record.class_names
        )));
    }
    let c = &record.config;
    let metrics = match c.precision {
        Precision::F32 => {
            let mut m = checkpoint_load::<f32>(&a.checkpoint).map_err(classify)?;
            evaluate(&mut m, &splits.test, &record.class_names, c.resolution, c.channel_mode)
        }
        Precision::F64 => {
            let mut m = checkpoint_load::<f64>(&a.checkpoint).map_err(classify)?;
            evaluate(&mut m, &splits.test, &record.class_names, c.resolution, c.channel_mode)
        }
    }
    .map_err(classify)?;
    emit(out, &metrics.to_string())
}

/// `requested` capped by LIGHTNET_NUM_THREADS when that is a positive
/// integer.
pub fn effective_jobs(requested: usize, env: Option<&str>) -> usize {
    let cap = env.and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    match cap {
        Some(c) => requested.clamp(1, c),
        None => requested.max(1),
    }
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> CliResult {
    let config = a.model.config(0);
    config.validate().map_err(classify)?;
    if a.k_list.is_empty() || a.seeds.is_empty() {
        return Err(Failure::invalid("--k-list and --seeds must be non-empty"));
    }
    let splits = load_splits(&a.data)?;
    let spec = mobilenetv3_large_spec(config.channel_mode.channels(), splits.classes.len(), a.model.width)
        .map_err(classify)?;
    let env = std::env::var(THREADS_ENV).ok();
    let plan = SweepPlan {
        train: &splits.train,
        test: &splits.test,
        class_names: &splits.classes,
        spec: &spec,
        k_list: &a.k_list,
        seeds: &a.seeds,
        config,
        jobs: effective_jobs(a.jobs, env.as_deref()),
    };
    let report = match plan.config.precision {
        Precision::F32 => run_limited_data_sweep::<f32>(&plan),
        Precision::F64 => run_limited_data_sweep::<f64>(&plan),
    }
    .map_err(classify)?;
    let csv = report.to_csv();
    std::fs::write(&a.out, &csv).map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    emit(out, &csv)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let results = run_suite(a.seed).map_err(Failure::runtime)?;
    let mut text = format!("{:<32} {:<12} {:>12} {:>10}  status\n", "op", "family", "max_rel_err", "threshold");
    for r in &results {
        text.push_str(&format!(
            "{:<32} {:<12} {:>12.3e} {:>10.0e}  {}\n",
            r.name,
            r.family,
            r.max_rel_error,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    let families: std::collections::BTreeSet<&str> = results.iter().map(|r| r.family).collect();
    text.push_str(&format!("{} checks across {} op families\n", results.len(), families.len()));
    emit(out, &text)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
