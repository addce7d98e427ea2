use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integration failed at t = {time} ps: step size fell below {min_step:e} ps")]
    StepUnderflow { time: f64, min_step: f64 },

    #[error("detuning #{index}: {inner}")]
    AtDetuning { index: usize, inner: Box<Error> },

    #[error("lifted snapshot matrix has numerical rank {rank}, need {required}; resample the training states")]
    RankDeficient { rank: usize, required: usize },

    #[error("singular value decomposition did not converge")]
    SvdFailure,

    #[error("surrogate prediction diverged at step {step}")]
    Diverged { step: usize },

    #[error("traces are not comparable: {0}")]
    GridMismatch(String),

    #[error("empty search window [{lo}, {hi}]")]
    EmptyWindow { lo: f64, hi: f64 },

    #[error("reference echo peak is zero")]
    ZeroReferencePeak,

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{}: {cause}", path.display())]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn at_detuning(index: usize, source: Error) -> Self {
        Error::AtDetuning {
            index,
            inner: Box::new(source),
        }
    }

    /// Strips detuning tags, returning the innermost error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtDetuning { inner, .. } => inner.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
