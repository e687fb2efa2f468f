use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss function returned different values for identical inputs")]
    NonDeterministic,

    #[error("unknown head `{0}`")]
    UnknownHead(String),

    #[error("head `{0}` is already registered")]
    DuplicateHead(String),

    #[error("trace belongs to parameter version {trace}, model is at version {model}")]
    StaleTrace { trace: u64, model: u64 },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("label `{label}` has {available} examples, episode needs {needed}")]
    InsufficientExamples {
        label: String,
        needed: usize,
        available: usize,
    },

    #[error("label sets are not aligned across datasets: {0}")]
    LabelMismatch(String),

    #[error("cannot form {k} clusters from {points} points")]
    TooFewPoints { points: usize, k: usize },

    #[error("matrix has rank zero")]
    RankZero,

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Diverged { iteration: usize, what: &'static str },

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::UnknownHead(_) | Error::DuplicateHead(_) => {
                ErrorKind::Config
            }
            Error::ArchitectureMismatch(_) => ErrorKind::Config,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::NonDeterministic => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
