use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("time {value} out of range [{min}, {max}]")]
    TimeOutOfRange { value: f64, min: f64, max: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unknown condition id {0}")]
    UnknownCondition(usize),

    #[error("model mode {mode} does not match schedule kind {kind}")]
    ModeMismatch {
        mode: &'static str,
        kind: &'static str,
    },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("the reference model is frozen and has no trainable gradient")]
    FrozenReference,

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("sampling produced NaN at step {step}")]
    SamplingDiverged { step: usize },

    #[error("training diverged at step {step}")]
    TrainingDiverged {
        step: usize,
        /// Last finite parameter vector(s) seen before divergence.
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("record {index} violates invariant: {message}")]
    InvalidRecord { index: usize, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path} (run `{requires}` first)")]
    MissingArtifact { path: PathBuf, requires: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TimeOutOfRange { .. } => "time_out_of_range",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownCondition(_) => "unknown_condition",
            Error::ModeMismatch { .. } => "mode_mismatch",
            Error::ArchitectureMismatch(_) => "architecture_mismatch",
            Error::FrozenReference => "frozen_reference",
            Error::Config { .. } => "config",
            Error::SamplingDiverged { .. } => "sampling_diverged",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Parse { .. } => "parse",
            Error::InvalidRecord { .. } => "invalid_record",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
