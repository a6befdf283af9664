use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the crate.
///
/// The CLI maps `Config`, `Validation` and `Load` onto exit code 2 (user
/// error) and everything else onto exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration: out-of-range hyperparameter, unknown key, missing
    /// artifact reference, fingerprint mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Data failed an invariant (label out of range, pixel outside [0,1],
    /// non-finite score, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A dataset or artifact could not be read.
    #[error("load error at {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// Training diverged or failed to reach the required floor.
    #[error("training failure: {0}")]
    Training(String),

    /// Calibration preconditions not met (too few scores, overlapping
    /// splits).
    #[error("calibration error: {0}")]
    Calibration(String),

    /// An operation was called with arguments that violate its contract
    /// (shape mismatch, incompatible components).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::Load { .. }
        )
    }
}
