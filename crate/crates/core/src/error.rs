use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents that cannot be combined, e.g. a matmul inner-dimension
    /// mismatch or a channel count that does not match a weight.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor whose shape violates an operation's precondition.
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Misuse of an API (backward on a non-scalar, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data outside its declared domain.
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// Refusal to allocate past a configured budget.
    #[error("resource limit: {0}")]
    Resource(String),

    #[error("non-finite value produced by {op}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { op: String, step: Option<usize> },

    /// A metric that is not defined for its inputs (e.g. Dice of two empty maps).
    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by the command-line driver for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Resource(_) | Error::Contract(_) => ErrorClass::Config,
            Error::NonFinite { .. } => ErrorClass::Numeric,
            Error::Dimension { .. }
            | Error::Shape { .. }
            | Error::Data(_)
            | Error::UndefinedMetric { .. }
            | Error::Format { .. }
            | Error::Io { .. } => ErrorClass::Data,
        }
    }

    /// Short stable identifier, printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Resource(_) => "resource",
            Error::NonFinite { .. } => "non_finite",
            Error::UndefinedMetric { .. } => "undefined_metric",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
