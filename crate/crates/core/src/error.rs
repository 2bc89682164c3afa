use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in `{op}`: operand {operand} outside the op's domain")]
    Domain { op: &'static str, operand: usize },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("layer {0} is not initialized")]
    Uninitialized(usize),

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("target log density returned NaN at sample {sample}")]
    TargetNaN { sample: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },

    #[error("training diverged: loss non-finite for {streak} consecutive steps ending at step {step}")]
    Diverged { step: usize, streak: usize },

    #[error("component {index}: {source}")]
    Component {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid experiment spec:\n  - {}", .0.join("\n  - "))]
    Spec(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{0}")]
    Check(String),
}

impl Error {
    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. }
            | Error::Domain { .. }
            | Error::NotScalar(_)
            | Error::NotOnTape
            | Error::Dimension { .. }
            | Error::Invalid(_)
            | Error::Uninitialized(_) => "usage",
            Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::TargetNaN { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. } => "numeric",
            Error::Layer { source, .. } | Error::Component { source, .. } => source.category(),
            Error::Version { .. } | Error::Corrupt(_) => "checkpoint",
            Error::Csv { .. } | Error::Spec(_) | Error::Config { .. } => "input",
            Error::Io { .. } => "io",
            Error::Check(_) => "check",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
