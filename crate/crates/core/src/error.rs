use std::path::PathBuf;

use crate::cues::CueSet;
use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: {0} has zero norm")]
    DegenerateVector(&'static str),

    #[error("invalid distribution: entries sum to {sum}")]
    InvalidDistribution { sum: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("finite-difference probe of {param}[{index}] produced a non-finite loss")]
    ProbeFailure { param: String, index: usize },

    #[error("cue variance needs at least 2 variants, got {0}")]
    InsufficientVariants(usize),

    #[error("cue regeneration failed: {reason}")]
    RegenerationFailed { reason: String, best: Box<CueSet> },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("top-k size {k} is outside 1..={experts}")]
    InvalidK { k: usize, experts: usize },

    #[error("expert index {index} out of range for {experts} experts")]
    InvalidExpert { index: usize, experts: usize },

    #[error("invalid routing: {0}")]
    InvalidRouting(&'static str),

    #[error("missing cues for sample {sample_id}, option {option}")]
    MissingCue { sample_id: String, option: usize },

    #[error("label {label} out of range for {options} options")]
    InvalidLabel { label: usize, options: usize },

    #[error("routing sharpness is undefined when every expert is selected")]
    UndefinedSharpness,

    #[error("category {0} needs at least 2 samples for routing variance")]
    InsufficientSamples(String),

    #[error("{options} options need at least as many concepts, got {concepts}")]
    InsufficientConcepts { options: usize, concepts: usize },

    #[error("training diverged at step {step}: total loss {}", breakdown.total)]
    Divergence {
        step: usize,
        breakdown: Box<LossBreakdown>,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
