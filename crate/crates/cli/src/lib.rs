//! Command implementations behind the `cogr` binary.
//!
//! Every command returns a [`CliError`] whose [`CliError::exit_code`] is the
//! process status: 2 for usage errors, 3 for data errors, 4 for training
//! divergence, 5 for a failed gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use cogr_core::model::Model;
use cogr_core::moe::RoutingMode;
use cogr_core::numerics::{seeded_rng, GradCheckReport, DEFAULT_STEP};
use cogr_core::trainer::{
    evaluate, generate_dataset, gradient_check, load_dataset, save_dataset, sweep, topk_margin, train,
    write_metrics, write_sweep, Ablation, EvalReport, Sample, SweepRow, TrainConfig,
};
use cogr_core::Error;
use serde::{Deserialize, Serialize};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_SAMPLES: usize = 4;
const GRADCHECK_MIN_MARGIN: f64 = 1e-3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
    GradCheck(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::GradCheck(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "divergence: {m}"),
            CliError::GradCheck(m) => write!(f, "gradient check failed: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config { .. } => CliError::Usage(message),
            Error::Divergence { .. } => CliError::Divergence(message),
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::MissingCue { .. }
            | Error::Consistency(_)
            | Error::EmptyDataset
            | Error::InsufficientConcepts { .. }
            | Error::InvalidLabel { .. }
            | Error::Shape { .. } => CliError::Data(message),
            _ => CliError::Other(message),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Options shared by every command that reads a config.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Comma-separated ablation flags added to those in the config.
    pub ablate: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
                }
                TrainConfig::load(path)?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(list) = &self.ablate {
            for name in list.split(',').filter(|s| !s.trim().is_empty()) {
                config.ablation.enable(name)?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub revision: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn start(command: &str, config: &TrainConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            revision: revision(),
            started_unix: now(),
            finished_unix: None,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        write_file(&dir.join(Self::FILE), text)
    }

    pub fn finish(&mut self, dir: &Path, outputs: Vec<PathBuf>) -> CliResult<()> {
        self.finished_unix = Some(now());
        self.outputs = outputs;
        self.write(dir)
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `git describe`-style revision of the working directory, or `unknown`.
fn revision() -> String {
    Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("directory {} does not exist", dir.display())))
    }
}

/// Generates the synthetic dataset and its cue files into `out_dir`.
pub fn cmd_gen_data(args: &ConfigArgs, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let config = args.resolve()?;
    ensure_dir(out_dir)?;
    let data = generate_dataset(&config, config.seed)?;
    save_dataset(&data, out_dir)?;
    config.save(out_dir.join("config.json"))?;
    Ok([
        cogr_core::trainer::TRAIN_FILE,
        cogr_core::trainer::TRAIN_CUES_FILE,
        cogr_core::trainer::HELDOUT_FILE,
        cogr_core::trainer::HELDOUT_CUES_FILE,
        "config.json",
    ]
    .iter()
    .map(|f| out_dir.join(f))
    .collect())
}

/// Trains on `data_dir` and writes `checkpoint.json`, `metrics.csv`, the
/// resolved config, and a run manifest into `out_dir`.
pub fn cmd_train(args: &ConfigArgs, data_dir: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let config = args.resolve()?;
    require_dir(data_dir)?;
    let data = load_dataset(data_dir)?;
    ensure_dir(out_dir)?;
    let mut manifest = RunManifest::start("train", &config);
    manifest.write(out_dir)?;

    let run = train(&config, &data)?;
    let checkpoint = out_dir.join("checkpoint.json");
    let metrics = out_dir.join("metrics.csv");
    let config_path = out_dir.join("config.json");
    run.model.save(&config, &checkpoint)?;
    write_metrics(&run.history, &metrics)?;
    config.save(&config_path)?;
    let outputs = vec![checkpoint, metrics, config_path];
    manifest.finish(out_dir, outputs.clone())?;
    Ok(outputs)
}

/// Held-out metrics of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mode: RoutingMode,
    pub samples: usize,
    pub accuracy: f64,
    pub sim: Option<f64>,
    pub sharpness: Option<f64>,
    pub variance_x10: Option<f64>,
}

impl EvalSummary {
    fn new(report: &EvalReport, samples: usize) -> Self {
        EvalSummary {
            mode: report.mode,
            samples,
            accuracy: report.accuracy,
            sim: report.sim,
            sharpness: report.diagnostics.sharpness,
            variance_x10: report.diagnostics.variance.map(|v| v * 10.0),
        }
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "mode,samples,accuracy,sim,sharpness,variance_x10\n{},{},{},{},{},{}\n",
            self.mode,
            self.samples,
            self.accuracy,
            opt(self.sim),
            opt(self.sharpness),
            opt(self.variance_x10)
        )
    }
}

fn load_heldout(data_dir: &Path) -> CliResult<Vec<Sample>> {
    require_dir(data_dir)?;
    Ok(cogr_core::trainer::load_split(
        &data_dir.join(cogr_core::trainer::HELDOUT_FILE),
        &data_dir.join(cogr_core::trainer::HELDOUT_CUES_FILE),
    )?)
}

fn load_checkpoint(path: &Path) -> CliResult<(Model, TrainConfig)> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Model::load(path)?)
}

/// Evaluates a checkpoint on the held-out split; optionally writes the
/// summary as CSV.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, mode: RoutingMode, out: Option<&Path>) -> CliResult<EvalSummary> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let heldout = load_heldout(data_dir)?;
    let report = evaluate(&model, &heldout, mode)?;
    let summary = EvalSummary::new(&report, heldout.len());
    if let Some(path) = out {
        write_file(path, summary.csv())?;
    }
    Ok(summary)
}

/// Runs the `(n, K)` grid and writes `sweep.csv` into `out_dir`. Uses the
/// dataset in `data_dir` when given, otherwise generates one from the
/// config.
pub fn cmd_sweep(
    args: &ConfigArgs,
    n_values: &[usize],
    k_values: &[usize],
    data_dir: Option<&Path>,
    out_dir: &Path,
) -> CliResult<Vec<SweepRow>> {
    let config = args.resolve()?;
    if n_values.is_empty() || k_values.is_empty() {
        return Err(CliError::Usage("--grid-n and --grid-k need at least one value".into()));
    }
    let data = match data_dir {
        Some(dir) => {
            require_dir(dir)?;
            load_dataset(dir)?
        }
        None => generate_dataset(&config, config.seed)?,
    };
    ensure_dir(out_dir)?;
    let mut manifest = RunManifest::start("sweep", &config);
    manifest.write(out_dir)?;
    let rows = sweep(n_values, k_values, &config, &data)?;
    let path = out_dir.join("sweep.csv");
    write_sweep(&rows, &path)?;
    manifest.finish(out_dir, vec![path])?;
    Ok(rows)
}

/// Writes `diagnostics.csv` and `heatmap.csv` for a checkpoint on the
/// held-out split.
pub fn cmd_diagnose(checkpoint: &Path, data_dir: &Path, mode: RoutingMode, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let (model, config) = load_checkpoint(checkpoint)?;
    let heldout = load_heldout(data_dir)?;
    let report = evaluate(&model, &heldout, mode)?;
    ensure_dir(out_dir)?;
    let diagnostics = out_dir.join("diagnostics.csv");
    let heatmap = out_dir.join("heatmap.csv");
    let run_id = format!("{}-{}", &config.hash()[..12], mode);
    report.diagnostics.write_csv(&run_id, &diagnostics)?;
    report.diagnostics.heatmap.write_csv(&heatmap)?;
    Ok(vec![diagnostics, heatmap])
}

/// Checks analytic against numeric gradients for a freshly initialized
/// model on a few generated samples whose Top-K selection is not within
/// `1e-3` of a tie.
pub fn cmd_gradcheck(args: &ConfigArgs) -> CliResult<Vec<GradCheckReport>> {
    let mut config = args.resolve()?;
    config.data.train_size = 64;
    config.data.heldout_size = 1;
    let data = generate_dataset(&config, config.seed)?;
    let model = Model::init(&config, &mut seeded_rng(config.seed))?;
    let mut samples = Vec::new();
    for s in &data.train {
        if topk_margin(&model, s)? >= GRADCHECK_MIN_MARGIN {
            samples.push(s.clone());
        }
        if samples.len() == GRADCHECK_SAMPLES {
            break;
        }
    }
    if samples.is_empty() {
        return Err(CliError::Data("no sample has a stable top-k selection".into()));
    }
    let reports = gradient_check(&model, &samples, &config, DEFAULT_STEP, GRADCHECK_TOLERANCE)?;
    Ok(reports)
}

/// Parses a comma-separated list of positive integers.
pub fn parse_grid(flag: &str, text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("{flag}: `{s}` is not a non-negative integer")))
        })
        .collect()
}

/// Accepts `teacher` or `student`.
pub fn parse_mode(text: &str) -> CliResult<RoutingMode> {
    text.parse()
        .map_err(|_| CliError::Usage(format!("--mode must be teacher or student, got `{text}`")))
}

/// Validates an ablation list without applying it.
pub fn check_ablate(list: &str) -> CliResult<()> {
    Ablation::from_list(list)?;
    Ok(())
}
