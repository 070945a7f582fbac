//! The `rectattn` command line: dataset generation, training, evaluation,
//! attention-map export and the numerical check battery.
//!
//! Exit codes are a stable contract: 0 success, 2 bad arguments or config,
//! 3 I/O failure, 4 shape or data mismatch, 5 a check failed.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rectattn::harness::{
    attention_map, evaluate, image_resolution_map, metrics_csv, train_with, AttentionKind, InsertionDepth, Model,
    TrainConfig,
};
use rectattn::netpbm;
use rectattn::synthdata::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetHeader};
use rectattn::verify::{run_all, VerifyOptions};
use rectattn::{Error, Tensor};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ARGS: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_CHECK_FAILED: i32 = 5;
const EXIT_INTERNAL: i32 = 1;

/// Environment variable capping worker threads. All work is currently
/// sequential, which satisfies every cap; the value is still validated.
pub const THREADS_ENV: &str = "RECTATTN_THREADS";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } | Error::Format(_) | Error::Json(_) => {
                EXIT_MISMATCH
            }
            Error::InvalidArgument(_) | Error::ZeroExtent(_) => EXIT_ARGS,
            _ => EXIT_INTERNAL,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(what: &str, path: &Path, e: impl fmt::Display) -> CliError {
    CliError::new(EXIT_IO, format!("{what} {}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "rectattn", version, about = "Rectangular spatial attention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print accuracy and mask agreement of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export attention maps, overlays and rectangles for the first images.
    Attnmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Run the numerical check battery and write a JSON report.
    Theory {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one check on purpose.
        #[arg(long)]
        inject_fault: bool,
    },
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

/// Training config file: the training hyperparameters plus data locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub train_set: PathBuf,
    pub val_set: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Write measured epoch times instead of zeros; makes the CSV differ
    /// between reruns.
    pub record_wall_time: bool,
    pub attention_kind: AttentionKind,
    pub lambda_eq: f64,
    pub use_residual: bool,
    pub use_rescale: bool,
    pub insertion_depth: InsertionDepth,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sharpness: f64,
    pub predictor_widths: [usize; 3],
    pub pw_width: usize,
    pub adversarial_init: bool,
}

impl Default for CliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            train_set: PathBuf::new(),
            val_set: PathBuf::new(),
            out_dir: PathBuf::new(),
            seed: t.seed,
            record_wall_time: false,
            attention_kind: t.attention_kind,
            lambda_eq: t.lambda_eq,
            use_residual: t.use_residual,
            use_rescale: t.use_rescale,
            insertion_depth: t.insertion_depth,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            sharpness: t.sharpness,
            predictor_widths: t.predictor_widths,
            pw_width: t.pw_width,
            adversarial_init: t.adversarial_init,
        }
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::new(EXIT_ARGS, format!("config: at `{path}`: {}", e.inner()))
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            attention_kind: self.attention_kind,
            lambda_eq: self.lambda_eq,
            use_residual: self.use_residual,
            use_rescale: self.use_rescale,
            insertion_depth: self.insertion_depth,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            sharpness: self.sharpness,
            predictor_widths: self.predictor_widths,
            pw_width: self.pw_width,
            adversarial_init: self.adversarial_init,
        }
    }

    /// Validates hyperparameters and every path before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        self.train_config()
            .validate()
            .map_err(|e| CliError::new(EXIT_ARGS, format!("config: {e}")))?;
        for (key, p) in [("train_set", &self.train_set), ("val_set", &self.val_set), ("out_dir", &self.out_dir)] {
            if p.as_os_str().is_empty() {
                return Err(CliError::new(EXIT_ARGS, format!("config: missing `{key}`")));
            }
        }
        for p in [&self.train_set, &self.val_set] {
            if !p.is_file() {
                return Err(io_err("cannot read dataset", p, "no such file"));
            }
        }
        fs::create_dir_all(&self.out_dir).map_err(|e| io_err("cannot create output directory", &self.out_dir, e))?;
        Ok(())
    }
}

/// Summary written next to the metrics after training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_eval: rectattn::harness::EvalReport,
    pub h1_correlation: Option<f64>,
    pub train_phi: Vec<f64>,
}

fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::new(EXIT_ARGS, format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    read_dataset(path).map_err(|e| match e {
        Error::Io(io) => io_err("cannot read dataset", path, io),
        other => CliError::new(EXIT_MISMATCH, format!("dataset {}: {other}", path.display())),
    })
}

fn load_model(path: &Path) -> CliResult<(Model, rectattn::nn::ParamStore)> {
    Model::load(path).map_err(|e| match e {
        Error::Io(io) => io_err("cannot read checkpoint", path, io),
        other => CliError::new(EXIT_MISMATCH, format!("checkpoint {}: {other}", path.display())),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err("cannot write", path, e))
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.classes < 2 {
        return Err(CliError::new(EXIT_ARGS, format!("need at least 2 classes, got {}", a.classes)));
    }
    if a.count == 0 {
        return Err(CliError::new(EXIT_ARGS, "count must be positive"));
    }
    let ds = generate_dataset(DatasetHeader {
        classes: a.classes,
        channels: a.channels,
        height: a.size,
        width: a.size,
        count: a.count,
        seed: a.seed,
    })?;
    write_dataset(&a.out, &ds).map_err(|e| match e {
        Error::Io(io) => io_err("cannot write", &a.out, io),
        other => other.into(),
    })?;
    let line = serde_json::json!({ "count": ds.len(), "digest": ds.digest()? });
    writeln!(out, "{line}").map_err(|e| CliError::new(EXIT_IO, e.to_string()))?;
    Ok(())
}

pub fn cmd_train(config: &Path, out: &mut dyn Write) -> CliResult<()> {
    let text = fs::read_to_string(config).map_err(|e| io_err("cannot read config", config, e))?;
    let cfg = CliConfig::parse(&text)?;
    cfg.validate()?;
    let train_set = load_dataset(&cfg.train_set)?;
    let val_set = load_dataset(&cfg.val_set)?;
    let outcome = train_with(&cfg.train_config(), &train_set, &val_set, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  val_acc {:.4}  psi {:.4}  eq {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.train_acc, r.val_acc, r.mean_psi, r.mean_eq_loss, r.wall_time
        );
    })?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    outcome.model.save(&ckpt, &outcome.store).map_err(|e| match e {
        Error::Io(io) => io_err("cannot write", &ckpt, io),
        other => other.into(),
    })?;
    write_file(
        &cfg.out_dir.join(METRICS_FILE),
        metrics_csv(&outcome.metrics, cfg.record_wall_time).as_bytes(),
    )?;
    let summary = TrainSummary {
        final_eval: evaluate(&outcome.model, &outcome.store, &val_set)?,
        h1_correlation: outcome.h1_correlation,
        train_phi: outcome.train_phi,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    write_file(&cfg.out_dir.join(SUMMARY_FILE), json.as_bytes())?;
    writeln!(out, "{json}").map_err(|e| CliError::new(EXIT_IO, e.to_string()))?;
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (model, store) = load_model(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let report = evaluate(&model, &store, &ds)?;
    let json = serde_json::to_string(&report).map_err(Error::from)?;
    writeln!(out, "{json}").map_err(|e| CliError::new(EXIT_IO, e.to_string()))?;
    Ok(())
}

/// Channel mean of a `[C, H, W]` image.
fn grayscale(img: &Tensor) -> CliResult<Tensor> {
    let s = img.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let plane = (0..hw)
        .map(|k| (0..c).map(|ch| img.data()[ch * hw + k]).sum::<f64>() / c as f64)
        .collect();
    Ok(Tensor::new(&[s[1], s[2]], plane)?)
}

pub fn cmd_attnmaps(checkpoint: &Path, dataset: &Path, out_dir: &Path, count: usize, out: &mut dyn Write) -> CliResult<()> {
    let (model, store) = load_model(checkpoint)?;
    let ds = load_dataset(dataset)?;
    model.check_dataset(&ds.header)?;
    if model.attention.is_none() {
        return Err(CliError::new(EXIT_ARGS, "checkpoint has no attention module"));
    }
    if count == 0 || count > ds.len() {
        return Err(CliError::new(
            EXIT_ARGS,
            format!("count must lie in 1..={}, got {count}", ds.len()),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err("cannot create", out_dir, e))?;
    let mut written = Vec::new();
    for (i, sample) in ds.samples.iter().take(count).enumerate() {
        let (map, rect) = attention_map(&model, &store, &sample.image)?.expect("module present");
        let overlay = netpbm::encode_overlay(
            &grayscale(&sample.image)?,
            &image_resolution_map(&model, &map, rect.as_ref())?,
        )?;
        let files = [
            (format!("{i:04}_map.pgm"), netpbm::encode_pgm(&map)?),
            (format!("{i:04}_overlay.ppm"), overlay),
            (
                format!("{i:04}_rect.json"),
                serde_json::to_vec_pretty(&rect).map_err(Error::from)?,
            ),
        ];
        for (name, bytes) in files {
            let path = out_dir.join(&name);
            write_file(&path, &bytes)?;
            written.push(name);
        }
    }
    writeln!(out, "{}", serde_json::json!({ "files": written })).map_err(|e| CliError::new(EXIT_IO, e.to_string()))?;
    Ok(())
}

pub fn cmd_theory(report: &Path, seed: u64, inject_fault: bool, out: &mut dyn Write) -> CliResult<()> {
    let rep = run_all(VerifyOptions { seed, inject_fault })?;
    let json = serde_json::to_string_pretty(&rep).map_err(Error::from)?;
    write_file(report, json.as_bytes())?;
    for c in &rep.checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {}", c.name).map_err(|e| CliError::new(EXIT_IO, e.to_string()))?;
    }
    if !rep.all_pass {
        let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        return Err(CliError::new(EXIT_CHECK_FAILED, format!("checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to stderr. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGS } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = threads_from_env().and_then(|_| match &cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Train { config } => cmd_train(config, out),
        Command::Eval { checkpoint, dataset } => cmd_eval(checkpoint, dataset, out),
        Command::Attnmaps {
            checkpoint,
            dataset,
            out: dir,
            count,
        } => cmd_attnmaps(checkpoint, dataset, dir, *count, out),
        Command::Theory {
            report,
            seed,
            inject_fault,
        } => cmd_theory(report, *seed, *inject_fault, out),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
