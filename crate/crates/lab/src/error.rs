use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] icfl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("malformed {what} at line {line}: {detail}")]
    Format {
        what: &'static str,
        line: usize,
        detail: String,
    },
    #[error("configuration mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("training aborted at step {step}: non-finite or singular state")]
    Aborted { step: usize },
}

impl LabError {
    /// Failures caused by the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LabError::Aborted { .. }
                | LabError::Core(icfl_core::Error::SingularCovariance { .. })
                | LabError::Core(icfl_core::Error::NonFinite { .. })
                | LabError::Core(icfl_core::Error::CholeskyFailed { .. })
                | LabError::Core(icfl_core::Error::EigenFailed)
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
