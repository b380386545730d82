//! Command-line front end: argument definitions, dispatch, run manifests and
//! exit-code mapping.

mod commands;
mod figures;
mod manifest;
mod output;
pub mod svg;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use figures::FIGURES;
pub use manifest::RunManifest;

pub const THREADS_ENV: &str = "BINSTYLE_THREADS";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_COMPUTE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "binstyle", version, about = "Logistic PCA embeddings and stylometric analyses of binary song features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Write the bundled 90-row synthetic Beatles-shaped corpus.
    Synth(SynthArgs),
    /// Fit logistic PCA and embed every song.
    Fit(FitArgs),
    /// Cross-validate m and choose k by deviance explained.
    Select(SelectArgs),
    /// Centroid, dispersion, distance and residual figures.
    Analyze(AnalyzeArgs),
    /// Flag outliers by robust (OGK) distance.
    Outliers(OutliersArgs),
    /// Leave-one-out authorship classification, k-means and disputed songs.
    Classify(ClassifyArgs),
    /// Repeat the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuModeArg {
    FixedZero,
    ColumnMainEffects,
}

impl From<MuModeArg> for crate::lpca::MuMode {
    fn from(m: MuModeArg) -> Self {
        match m {
            MuModeArg::FixedZero => crate::lpca::MuMode::FixedZero,
            MuModeArg::ColumnMainEffects => crate::lpca::MuMode::ColumnMainEffects,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleArg {
    Mad,
    Qn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Logreg,
    Knn,
    Rf,
    All,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = crate::corpus::BUNDLED_SEED)]
    pub seed: u64,
    /// Destination CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub m: f64,
    #[arg(long, default_value_t = 35)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = MuModeArg::FixedZero)]
    pub mu_mode: MuModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Random starts tried after the PCA start.
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub restarts: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    pub m_grid: Vec<f64>,
    #[arg(long, default_value_t = crate::lpca::DEFAULT_FOLDS)]
    pub folds: usize,
    /// Number of components used while cross-validating m.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Deviance-explained target for choosing k.
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = MuModeArg::FixedZero)]
    pub mu_mode: MuModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Random starts tried after the PCA start.
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub restarts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Model file; required by the outlier-features figure.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated figure names, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub figures: Vec<String>,
    /// Authors compared in the centroid figures; the first two form the
    /// distance pair.
    #[arg(long, value_delimiter = ',', default_value = "Lennon,McCartney")]
    pub authors: Vec<String>,
    /// Author whose songs are measured against the others' centroids.
    #[arg(long, default_value = "Harrison")]
    pub subject: String,
    /// Outlier report to attribute; computed with default settings if absent.
    #[arg(long)]
    pub outliers: Option<PathBuf>,
    /// Residual ranks counted per outlier.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct OutliersArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 0.975)]
    pub quantile: f64,
    /// Leading components to use (default: all).
    #[arg(long)]
    pub pcs: Option<usize>,
    /// Authors whose songs are screened, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "Lennon,McCartney")]
    pub authors: Vec<String>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Mad)]
    pub scale: ScaleArg,
    #[arg(long, default_value_t = 2)]
    pub rounds: usize,
    #[arg(long)]
    pub no_reweight: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::All)]
    pub method: MethodArg,
    /// Leading components to use (default: all).
    #[arg(long)]
    pub pcs: Option<usize>,
    /// Label-1 and label-0 authors.
    #[arg(long, value_delimiter = ',', default_value = "Lennon,McCartney")]
    pub authors: Vec<String>,
    #[arg(long, default_value_t = crate::attrib::DEFAULT_RIDGE)]
    pub ridge: f64,
    #[arg(long = "k", default_value_t = crate::attrib::DEFAULT_K_NEIGHBORS)]
    pub k_neighbors: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_trees: usize,
    #[arg(long, default_value_t = 6)]
    pub mtry: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub kmeans_restarts: usize,
    /// CSV with a `title` column listing songs to predict instead of train on.
    #[arg(long)]
    pub disputed: Option<PathBuf>,
    /// CSV with `title` and `author` columns: an external reference prediction.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Fit(_) => "fit",
            Command::Select(_) => "select",
            Command::Analyze(_) => "analyze",
            Command::Outliers(_) => "outliers",
            Command::Classify(_) => "classify",
            Command::Rerun(_) => "rerun",
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Synth(a) => a.out = out,
            Command::Fit(a) => a.out = out,
            Command::Select(a) => a.out = out,
            Command::Analyze(a) => a.out = out,
            Command::Outliers(a) => a.out = out,
            Command::Classify(a) => a.out = out,
            Command::Rerun(a) => a.out = Some(out),
        }
    }
}

/// A failed command with the class that decides its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or unreadable/malformed input: exit 2.
    Usage(String),
    /// The computation itself failed: exit 3.
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Compute(_) => EXIT_COMPUTE,
        }
    }

    pub(crate) fn input(path: &std::path::Path, err: impl fmt::Display) -> Self {
        CliError::Usage(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Compute(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::Format(_) | Error::Shape(_) | Error::Csv(_) | Error::Json(_) | Error::Io(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Compute(e.to_string()),
        }
    }
}

/// Sizes the global worker pool from `BINSTYLE_THREADS` (unset or 0: one
/// worker per core). Returns the number of workers.
pub fn configure_threads() -> Result<usize, CliError> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a non-negative integer")))?,
        Err(_) => 0,
    };
    #[cfg(feature = "parallel")]
    {
        if requested > 0 {
            // Fails only if a pool already exists, in which case it is kept.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(requested).build_global();
        }
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        Ok(1)
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => commands::synth(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Select(a) => commands::select(&a),
        Command::Analyze(a) => figures::analyze(&a),
        Command::Outliers(a) => commands::outliers(&a),
        Command::Classify(a) => commands::classify(&a),
        Command::Rerun(a) => {
            let text = std::fs::read_to_string(&a.manifest).map_err(|e| CliError::input(&a.manifest, e))?;
            let manifest = RunManifest::from_json(&text).map_err(|e| CliError::input(&a.manifest, e))?;
            let mut inner = manifest.command;
            if matches!(inner, Command::Rerun(_)) {
                return Err(CliError::Usage("a manifest cannot record a rerun".into()));
            }
            if let Some(out) = a.out {
                inner.set_out(out);
            }
            run(inner)
        }
    }
}
