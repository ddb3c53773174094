//! The `stlstm` command line.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error,
//! 3 numerical failure.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{generate_lane_dataset_strided, read_dataset, write_dataset, CurvatureMode, Dataset, LaneWorld};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suites, Suite, DEFAULT_TOLERANCE};
use crate::layers::CellUpdate;
use crate::model::{Checkpoint, Model, NetworkSpec};
use crate::optim::{train, MetricRecord, TrainConfig, TrainSink};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const EVAL_CSV_HEADER: &str = "index,actual_deg,predicted_deg,abs_error_deg";

/// Segments per inference batch in `eval` and `infer`.
const INFER_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "stlstm", version, about = "Spatiotemporal ConvLSTM steering-angle network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic lane dataset to an STLD file.
    Datagen(DatagenArgs),
    /// Train a model and write checkpoints and JSONL metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print predicted steering angles.
    Infer(InferArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CurvatureArg {
    Constant,
    Sine,
    RandomWalk,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Standard deviation of Gaussian pixel noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = CurvatureArg::Sine)]
    pub curvature_mode: CurvatureArg,
    /// Constant curvature, or the sine amplitude (default 0.0 and 0.05).
    #[arg(long)]
    pub curvature: Option<f64>,
    /// Sine period in frames.
    #[arg(long, default_value_t = 150.0)]
    pub period: f64,
    /// Random-walk increment standard deviation.
    #[arg(long, default_value_t = 0.002)]
    pub walk_step: f64,
    #[arg(long, default_value_t = 1)]
    pub segment_stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Stlstm,
    Cnn2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CellUpdateArg {
    Standard,
    Additive,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Stlstm)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub out_metrics: PathBuf,
    #[arg(long)]
    pub no_shuffle: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Include elapsed wall time in every metric record.
    #[arg(long)]
    pub record_wall_time: bool,
    #[arg(long, value_enum, default_value_t = CellUpdateArg::Standard)]
    pub cell_update: CellUpdateArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayerArg {
    All,
    Conv2d,
    Conv3d,
    Convlstm,
    Bn,
    Dense,
    LeakyRelu,
    Model,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub layers: Vec<LayerArg>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Segment to predict; all segments when omitted.
    #[arg(long)]
    pub index: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command,
/// writing human output to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match execute(&cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Datagen(a) => datagen(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Infer(a) => infer(a, out),
    }
}

fn datagen(a: &DatagenArgs, out: &mut dyn Write) -> Result<i32> {
    if a.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    if a.segment_stride == 0 {
        return Err(Error::Usage("--segment-stride must be at least 1".into()));
    }
    let mode = match a.curvature_mode {
        CurvatureArg::Constant => CurvatureMode::Constant { curvature: a.curvature.unwrap_or(0.0) },
        CurvatureArg::Sine => CurvatureMode::Sine { amplitude: a.curvature.unwrap_or(0.05), period: a.period },
        CurvatureArg::RandomWalk => {
            if a.curvature.is_some() {
                return Err(Error::Usage("--curvature does not apply to random-walk; use --walk-step".into()));
            }
            CurvatureMode::RandomWalk { step: a.walk_step }
        }
    };
    let mut world = LaneWorld::from_mode(&mode, a.count, a.segment_stride, a.seed)?;
    world.height = a.height;
    world.width = a.width;
    world.noise_level = a.noise;
    let samples = generate_lane_dataset_strided(&world, a.count, a.segment_stride)?;
    write_dataset(&samples, &a.out)?;
    let s = samples[0].segment.frames.shape();
    writeln!(out, "wrote {} samples of shape ({},{},{},{}) to {}", samples.len(), s[0], s[1], s[2], s[3], a.out.display())?;
    Ok(EXIT_OK)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| match e {
        Error::Io(io) => Error::Usage(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Usage(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

/// Streams JSONL records to a temporary file that replaces the target once
/// training stops, and rewrites the checkpoint after every epoch.
struct FileSink {
    metrics: BufWriter<tempfile::NamedTempFile>,
    checkpoint: PathBuf,
}

impl TrainSink for FileSink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        // Lets a long run be followed from the temp file.
        self.metrics.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, _epoch: usize, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(&self.checkpoint)
    }
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let dataset = load_dataset(&a.data)?;
    let [t, c, h, w] = dataset.shape();
    let mut spec = match a.model {
        ModelArg::Stlstm => NetworkSpec::spatiotemporal(h, w),
        ModelArg::Cnn2d => NetworkSpec::baseline(h, w),
    };
    spec.input_shape = [t, c, h, w];
    spec.cell_update = match a.cell_update {
        CellUpdateArg::Standard => CellUpdate::Standard,
        CellUpdateArg::Additive => CellUpdate::Additive,
    };
    let mut model = Model::<f32>::build(&spec, a.seed)?;
    let config = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        shuffle: !a.no_shuffle,
        adam: crate::optim::AdamConfig { learning_rate: a.lr, ..Default::default() },
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        record_wall_time: a.record_wall_time,
    };
    if config.epochs == 0 {
        return Err(Error::Usage("--epochs must be at least 1".into()));
    }
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let dir = match a.out_metrics.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut sink = FileSink {
        metrics: BufWriter::new(tempfile::NamedTempFile::new_in(dir)?),
        checkpoint: a.out_checkpoint.clone(),
    };
    let result = train(&mut model, &dataset, &config, &mut sink);
    // Metrics are kept even when training aborts, for diagnosis.
    let tmp = sink.metrics.into_inner().map_err(|e| e.into_error())?;
    tmp.as_file().sync_all()?;
    tmp.persist(&a.out_metrics).map_err(|e| e.error)?;
    let (_, summary) = result?;
    writeln!(
        out,
        "trained {} steps over {} epochs: first loss {:.6e}, last-epoch mean loss {:.6e}, final loss {:.6e}",
        summary.steps, config.epochs, summary.first_loss, summary.final_epoch_loss, summary.final_loss
    )?;
    Ok(EXIT_OK)
}

/// Predictions in degrees for every dataset sample, in order.
fn predict_all(model: &Model<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    if dataset.shape() != model.spec().input_shape {
        return Err(Error::dim(
            "checkpoint vs dataset",
            "segment shape",
            format!("{:?}", model.spec().input_shape),
            format!("{:?}", dataset.shape()),
        ));
    }
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(INFER_BATCH) {
        let (x, _) = dataset.batch(chunk)?;
        let p = model.predict_degrees(&x)?;
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { tensor: format!("prediction for sample {}", chunk[i]) });
        }
        preds.extend(p);
    }
    Ok(preds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mse: f64,
    pub mae: f64,
    /// Population variance of (predicted − actual).
    pub error_variance: f64,
}

pub fn summarize(actual: &[f64], predicted: &[f64]) -> EvalSummary {
    let n = actual.len() as f64;
    let errs: Vec<f64> = predicted.iter().zip(actual).map(|(p, a)| p - a).collect();
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / n;
    let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mean = errs.iter().sum::<f64>() / n;
    let error_variance = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    EvalSummary { count: actual.len(), mse, mae, error_variance }
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let preds = predict_all(&ckpt.model, &dataset, &indices)?;
    let actual: Vec<f64> = dataset.samples().iter().map(|s| s.steering_deg as f64).collect();
    let mut csv = String::with_capacity(32 * (actual.len() + 1));
    csv.push_str(EVAL_CSV_HEADER);
    csv.push('\n');
    for (i, (a, p)) in actual.iter().zip(&preds).enumerate() {
        csv.push_str(&format!("{i},{a},{p},{}\n", (a - p).abs()));
    }
    crate::fsutil::write_atomic(&a.out_csv, csv.as_bytes())?;
    let summary = summarize(&actual, &preds);
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(EXIT_OK)
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    if !(a.tolerance >= 0.0) {
        return Err(Error::Usage(format!("--tolerance must be non-negative, got {}", a.tolerance)));
    }
    let mut suites = Vec::new();
    for layer in &a.layers {
        let add: &[Suite] = match layer {
            LayerArg::All => &Suite::ALL,
            LayerArg::Conv2d => &[Suite::Conv2d],
            LayerArg::Conv3d => &[Suite::Conv3d],
            LayerArg::Convlstm => &[Suite::ConvLstm],
            LayerArg::Bn => &[Suite::BatchNorm],
            LayerArg::Dense => &[Suite::Dense],
            LayerArg::LeakyRelu => &[Suite::LeakyRelu],
            LayerArg::Model => &[Suite::Model],
        };
        for s in add {
            if !suites.contains(s) {
                suites.push(*s);
            }
        }
    }
    let reports = run_suites(&suites, a.seed, a.tolerance)?;
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.name()).collect();
    if failed.is_empty() {
        writeln!(out, "all {} suites passed", reports.len())?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "FAILED: {}", failed.join(", "))?;
        Ok(EXIT_CHECK_FAILED)
    }
}

fn infer(a: &InferArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let indices: Vec<usize> = match a.index {
        Some(i) if i >= dataset.len() => {
            return Err(Error::Usage(format!("--index {i} out of range (dataset has {} samples)", dataset.len())))
        }
        Some(i) => vec![i],
        None => (0..dataset.len()).collect(),
    };
    let preds = predict_all(&ckpt.model, &dataset, &indices)?;
    for (i, p) in indices.iter().zip(&preds) {
        writeln!(out, "{i},{p}")?;
    }
    Ok(EXIT_OK)
}
