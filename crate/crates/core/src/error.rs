use dmpo_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmpoError {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("environment fault: {0}")]
    Env(String),
    #[error("probability ratio overflow: log-ratio {log_ratio}")]
    RatioOverflow { log_ratio: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DmpoError {
    /// Short stable identifier, used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            DmpoError::Autodiff(_) => "autodiff",
            DmpoError::InvalidArgument(_) => "invalid-argument",
            DmpoError::DimMismatch { .. } => "dim-mismatch",
            DmpoError::Diverged { .. } => "diverged",
            DmpoError::Env(_) => "env",
            DmpoError::RatioOverflow { .. } => "ratio-overflow",
            DmpoError::Checkpoint(_) => "checkpoint",
            DmpoError::Checksum { .. } => "checksum",
            DmpoError::Version { .. } => "version",
            DmpoError::Config(_) => "config",
            DmpoError::Io(_) => "io",
            DmpoError::Json(_) => "json",
            DmpoError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, DmpoError>;

pub(crate) fn ensure_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DmpoError::DimMismatch {
            what,
            expected,
            got,
        })
    }
}
