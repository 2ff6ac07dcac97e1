use std::path::PathBuf;

use thiserror::Error;

use crate::SampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by model backends.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable for sample {sample} after {attempts} attempt(s): {reason}")]
    Unavailable {
        sample: SampleId,
        attempts: u32,
        reason: String,
    },
    #[error("protocol error for sample {sample}: {reason}")]
    Protocol { sample: SampleId, reason: String },
    #[error("script exhausted for sample {sample}")]
    ScriptExhausted { sample: SampleId },
    #[error("invalid request for sample {sample}: {reason}")]
    InvalidRequest { sample: SampleId, reason: String },
}

impl BackendError {
    pub fn sample(&self) -> SampleId {
        match self {
            BackendError::Unavailable { sample, .. }
            | BackendError::Protocol { sample, .. }
            | BackendError::ScriptExhausted { sample }
            | BackendError::InvalidRequest { sample, .. } => *sample,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("duplicate sample id {0}")]
    DuplicateId(SampleId),
    #[error("sample {0} has empty code")]
    EmptyCode(SampleId),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("split manifest does not match corpus: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("template: {0}")]
    Template(String),
    #[error(
        "exemplar pool too small: need {need_vulnerable} vulnerable + {need_clean} clean, \
         have {have_vulnerable} + {have_clean}"
    )]
    ExemplarPool {
        need_vulnerable: usize,
        need_clean: usize,
        have_vulnerable: usize,
        have_clean: usize,
    },
    #[error("store {}: {msg}", path.display())]
    Store { path: PathBuf, msg: String },
    #[error(
        "store {} was written by a different configuration (found {found}, expected {expected}); \
         use a fresh store path",
        path.display()
    )]
    StaleStore {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("store lacks completed assessments for {} sample(s): {missing:?}", missing.len())]
    Coverage { missing: Vec<SampleId> },
    #[error("no assessment for sample {0}")]
    MissingAssessment(SampleId),
    #[error("assessment must cover train, valid and test together; requested only {0:?}")]
    PartialEnrichment(Vec<String>),
    #[error("failure threshold exceeded: {failed} of {total} samples failed (limit {limit:.3})")]
    FailureThreshold {
        failed: usize,
        total: usize,
        limit: f64,
    },
    #[error(
        "prediction and truth ids differ: only in predictions {only_predictions:?}, \
         only in truths {only_truths:?}"
    )]
    KeyMismatch {
        only_predictions: Vec<SampleId>,
        only_truths: Vec<SampleId>,
    },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("overlap analysis needs 2 or 3 models, got {0}")]
    ModelCount(usize),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {error}", path.display())]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, error: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error,
        }
    }
}
