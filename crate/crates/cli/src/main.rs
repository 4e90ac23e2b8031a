//! `ecgdx`: synthesize, preprocess, train and evaluate from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ecgdx::augment::DEFAULT_CROP_LEN;
use ecgdx::features::feature_names;
use ecgdx::io::{load_dataset, load_record, save_record};
use ecgdx::metrics::Report;
use ecgdx::nn::{
    load_checkpoint, probabilities, save_checkpoint, threshold_labels, write_log, ModelConfig, PoolMode, Prepared,
    TrainConfig,
};
use ecgdx::record::{Dataset, Split};
use ecgdx::synth::{generate_dataset, parse_mix, write_dataset, DatasetSpec, NoiseSpec};

#[derive(Parser, Debug)]
#[command(name = "ecgdx", version, about = "Multi-label abnormality detection on 12-lead ECGs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic dataset (ECG1 files, labels.csv, truth JSON)
    Synth(SynthArgs),
    /// Wavelet-denoise one record
    Denoise(DenoiseArgs),
    /// Detect R peaks and mark irregular regions; prints JSON
    Detect(DetectArgs),
    /// Extract the 20 hand-crafted features of every record; prints CSV
    Features(FeaturesArgs),
    /// Train a model; prints the per-epoch log as CSV
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset; prints per-label F1
    Eval(EvalArgs),
    /// Predict the labels of one record
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for every random choice
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores); results do not depend on it
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseLevel {
    Default,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Class mix, e.g. normal=50,pvc=50,af+pac=10
    #[arg(long)]
    mix: String,
    /// Split the records belong to
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Shortest record, seconds
    #[arg(long, default_value_t = 10.0)]
    min_duration: f64,
    /// Longest record, seconds
    #[arg(long, default_value_t = 20.0)]
    max_duration: f64,
    /// Noise model
    #[arg(long, value_enum, default_value_t = NoiseLevel::Default)]
    noise: NoiseLevel,
    /// Record id prefix
    #[arg(long, default_value = "rec")]
    prefix: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    /// Input ECG1 record
    #[arg(long)]
    input: PathBuf,
    /// Output ECG1 record
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Input ECG1 record
    #[arg(long)]
    input: PathBuf,
    /// Write JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    /// Dataset directory (labels.csv plus ECG1 files)
    #[arg(long)]
    data: PathBuf,
    /// Write CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Width {
    /// 32,64,128,256 channels
    Full,
    /// 8,16,32,64 channels
    Reduced,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory (default: the training set)
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Write the trained checkpoint here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the training log here instead of stdout
    #[arg(long)]
    log: Option<PathBuf>,
    /// Training epochs
    #[arg(long, default_value_t = 70)]
    epochs: usize,
    /// Records per minibatch
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// L2 weight decay
    #[arg(long, default_value_t = 1e-6)]
    weight_decay: f64,
    /// Epochs without validation improvement before the lr is divided by 5
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Training crop length in samples
    #[arg(long, default_value_t = DEFAULT_CROP_LEN)]
    crop_len: usize,
    /// Global pooling over time
    #[arg(long, value_parser = parse_pool, default_value = "both")]
    pool: PoolMode,
    /// Drop the hand-crafted features from the head
    #[arg(long)]
    no_features: bool,
    /// Crop uniformly instead of around irregular regions
    #[arg(long)]
    no_heuristic_crop: bool,
    /// Network width
    #[arg(long, value_enum, default_value_t = Width::Full)]
    width: Width,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labelled dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Probability threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Write the CSV table here; a text table still goes to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Input ECG1 record
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint to use
    #[arg(long)]
    ckpt: PathBuf,
    /// Probability threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[command(flatten)]
    common: Common,
}

fn parse_pool(s: &str) -> Result<PoolMode, String> {
    s.parse()
}

/// Stdout unless a path is given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load(dir: &Path, split: Split) -> Result<Dataset> {
    load_dataset(dir, split).with_context(|| format!("loading dataset {}", dir.display()))
}

fn prepare_all(dataset: &Dataset, threads: usize) -> Result<Vec<Prepared>> {
    Ok(ecgdx::par::with_threads(threads, || ecgdx::nn::prepare(dataset))?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = DatasetSpec::new(parse_mix(&a.mix)?, a.common.seed);
    spec.split = a.split.into();
    spec.duration_s = (a.min_duration, a.max_duration);
    spec.id_prefix = a.prefix;
    if let NoiseLevel::None = a.noise {
        spec.noise = NoiseSpec::none();
    }
    let (dataset, truths) = ecgdx::par::with_threads(a.common.threads, || generate_dataset(&spec))?;
    write_dataset(&dataset, &truths, &a.out)?;
    log::info!("wrote {} records to {}", dataset.len(), a.out.display());
    Ok(())
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    let rec = load_record(&a.input)?;
    let out = ecgdx::par::with_threads(a.common.threads, || ecgdx::dsp::denoise(&rec))?;
    save_record(&out, &a.out)?;
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let rec = load_record(&a.input)?;
    let denoised = ecgdx::par::with_threads(a.common.threads, || ecgdx::dsp::denoise(&rec))?;
    let analysis = ecgdx::qrs::analyze(&denoised)?;
    let json = serde_json::json!({
        "id": rec.id(),
        "sample_rate_hz": rec.sample_rate_hz(),
        "r_peaks": analysis.r_peaks,
        "regions": analysis.regions.intervals(),
    });
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&json)? + "\n"))
}

fn features(a: FeaturesArgs) -> Result<()> {
    let dataset = load(&a.data, Split::Test)?;
    let prepared = prepare_all(&dataset, a.common.threads)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(feature_names());
    wtr.write_record(&header)?;
    for p in &prepared {
        let mut row = vec![p.record.id().to_string()];
        row.extend(
            p.features
                .values
                .iter()
                .zip(p.features.valid)
                .map(|(v, ok)| if ok { v.to_string() } else { String::new() }),
        );
        wtr.write_record(&row)?;
    }
    let bytes = wtr.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    emit(a.out.as_deref(), std::str::from_utf8(&bytes)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let channels = match a.width {
        Width::Full => ModelConfig::default().channels,
        Width::Reduced => ModelConfig::reduced().channels,
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        plateau_patience: a.patience,
        seed: a.common.seed,
        crop_len: a.crop_len,
        heuristic_crop: !a.no_heuristic_crop,
        model: ModelConfig { channels, use_features: !a.no_features, pool: a.pool, ..ModelConfig::default() },
        threads: a.common.threads,
        ..TrainConfig::default()
    };
    let train = load(&a.data, Split::Train)?;
    let valid = match &a.valid {
        Some(dir) => load(dir, Split::Validation)?,
        None => train.clone(),
    };
    let out = ecgdx::nn::fit(&train, &valid, &cfg)?;
    log::info!("best epoch {}", out.best_epoch);
    if let Some(path) = &a.out {
        save_checkpoint(&out.model, Some(&out.adam), path)?;
    }
    let mut buf = Vec::new();
    write_log(&out.log, &mut buf)?;
    emit(a.log.as_deref(), std::str::from_utf8(&buf)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let dataset = load(&a.data, Split::Test)?;
    let prepared = prepare_all(&dataset, a.common.threads)?;
    let probs = ecgdx::par::with_threads(a.common.threads, || probabilities(&model, &prepared, DEFAULT_CROP_LEN))?;
    let preds: Vec<_> = probs.iter().map(|p| threshold_labels(p, a.threshold)).collect();
    let truths: Vec<_> = dataset.records().iter().map(|r| r.labels).collect();
    let report = Report::from_predictions(&preds, &truths)?;
    match &a.out {
        Some(path) => {
            fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            emit(None, &report.to_text())
        }
        None => emit(None, &report.to_csv()),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let rec = load_record(&a.input)?;
    let p = ecgdx::par::with_threads(a.common.threads, || Prepared::new(&rec, None))?;
    let probs = probabilities(&model, &[p], DEFAULT_CROP_LEN)?[0];
    let labels = threshold_labels(&probs, a.threshold);
    let names: Vec<&str> = labels.active().map(|l| l.name()).collect();
    let json = serde_json::json!({
        "id": rec.id(),
        "labels": names,
        "probabilities": ecgdx::record::Label::ALL.iter().map(|l| (l.name().to_string(), serde_json::json!(probs[l.index()]))).collect::<serde_json::Map<_, _>>(),
    });
    emit(None, &(serde_json::to_string_pretty(&json)? + "\n"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Denoise(a) => denoise(a),
        Command::Detect(a) => detect(a),
        Command::Features(a) => features(a),
        Command::Train(a) => {
            if a.epochs == 0 {
                bail!("--epochs must be positive");
            }
            train(a)
        }
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ECGDX_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
