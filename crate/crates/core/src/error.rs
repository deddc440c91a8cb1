use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent user configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical invariant was violated during a run.
    #[error("numerical invariant violated: {0}")]
    Invariant(String),

    /// Requested time lies outside the range covered by stored data.
    #[error("time {t} outside covered range [{start}, {end}]")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },

    /// Two objects that must share a grid or time axis do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Every point of a frame was masked out.
    #[error("frame at t = {0} has no valid points")]
    EmptyFrame(f64),

    #[error("gauge reference mismatch between frames at t = {0} and t = {1}")]
    GaugeMismatch(f64, f64),

    #[error("too few trajectories: {have} < {need}")]
    TooFewTrajectories { have: usize, need: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } => 2,
            Error::Invariant(_) | Error::EmptyFrame(_) | Error::GaugeMismatch(..) => 3,
            Error::TooFewTrajectories { .. } => 3,
            Error::TimeOutOfRange { .. } | Error::GridMismatch(_) => 2,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
