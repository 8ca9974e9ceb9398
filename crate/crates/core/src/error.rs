use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared across the crate.
///
/// Variants split into two families: validation failures (bad input, bad
/// configuration, unreadable files) and numerical failures (non-convergence,
/// divergence, degenerate statistics). [`Error::is_numerical`] tells them apart
/// so the command-line front end can pick an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("report has no per-dataset entries")]
    ReportEmpty,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("degenerate dispersion: fewer than two non-empty predicted classes or zero scatter")]
    DegenerateDispersion,

    #[error("empty class: {0}")]
    EmptyClass(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures of the arithmetic itself rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPsd(_)
            | Error::NoConvergence { .. }
            | Error::TrainingDiverged { .. }
            | Error::DegenerateFit(_)
            | Error::DegenerateDispersion => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
