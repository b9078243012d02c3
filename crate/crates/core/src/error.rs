//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DrmError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("dataset validation failed at {record}: {reason}")]
    InvalidRecord { record: String, reason: String },

    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: String, details: String },

    #[error("attention mask row {row} allows no keys")]
    AllMaskedRow { row: usize },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("sample needs at least 2 entities, got {0}")]
    TooFewEntities(usize),

    #[error("contrastive batch has no anchor with a positive")]
    NoPositivePair,

    #[error("loss term {term} is not finite")]
    NonFiniteLoss { term: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("empty class {0} requested")]
    EmptyClass(String),

    #[error("cholesky factorization failed after jitter (dim {dim})")]
    CholeskyFailed { dim: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metrics error: {0}")]
    Metrics(String),
}

impl DrmError {
    /// Exit code for the CLI: 2 for validation problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DrmError::InvalidSpec(_)
            | DrmError::InvalidRecord { .. }
            | DrmError::InvalidConfig(_)
            | DrmError::Parse { .. } => 2,
            _ => 1,
        }
    }
}
