//! Orchestration layer: config loading with dotted-path overrides, cached
//! pipeline stages (corpus, SFT policy, reward models), RL runs with
//! persisted logs and checkpoints, evaluation, sweeps, Pareto extraction,
//! and SVG plots.

pub mod commands;
pub mod overrides;
pub mod pipeline;
pub mod runid;
pub mod svg;
pub mod sweep;

/// Process exit codes: 0 success, 1 runtime error, 2 usage or config error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Runtime,
    Usage,
}

/// Error wrapper that distinguishes usage/config problems (exit 2) from
/// runtime failures (exit 1).
#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Usage,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Runtime,
            error: error.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Maps core errors onto exit kinds: configuration and input problems are
/// usage errors, everything else is a runtime failure.
pub fn classify(err: rlhf_lab::Error) -> CliError {
    use rlhf_lab::Error as E;
    match err {
        E::Config(_) | E::Input(_) | E::UnsupportedMode(_) | E::Calibration { .. } => {
            CliError::usage(err)
        }
        _ => CliError::runtime(err),
    }
}
