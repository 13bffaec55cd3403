use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad sizes, out-of-range knobs).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (non-finite features, mismatched lengths).
    #[error("input error: {0}")]
    Input(String),

    /// Operation not available in the current reward-model mode.
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    /// Annotator bias calibration could not reach the requested fraction.
    #[error(
        "calibration error: target chosen-longer fraction {target} unreachable; \
         achievable range is [{min:.4}, {max:.4}]"
    )]
    Calibration { target: f64, min: f64, max: f64 },

    /// Training diverged or produced non-finite values; carries a diagnostic
    /// snapshot of where it happened.
    #[error("training aborted: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
