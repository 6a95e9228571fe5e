//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A reduction was requested over zero samples.
    EmptyBatch,
    /// An input tensor contains NaN or infinity.
    NonFiniteFeature,
    /// Vector or tensor dimensions disagree.
    DimensionMismatch { expected: usize, got: usize },
    /// Cosine divergence against a zero-norm vector.
    UndefinedCosine,
    /// A selection ratio outside [0, 1], or both ratios zero.
    InvalidRatio(f64),
    /// Matched normal selection asked for more snippets than exist.
    InsufficientNormalSnippets { requested: usize, available: usize },
    /// A loss was given zero selected snippets.
    EmptySelection,
    /// Train-mode forward on fewer than two snippets.
    DegenerateBatch,
    /// Backward called with a cache from the wrong mode.
    ModeMismatch,
    /// AUC is undefined when only one class is present.
    UndefinedAuc,
    /// Average precision is undefined without positives.
    NoPositives,
    /// Evaluation needs per-snippet labels.
    MissingSnippetLabels,
    /// Anything wrong with a config value.
    InvalidConfig(String),
    /// Malformed checkpoint, manifest, payload, or score file.
    Format(String),
    Io(std::io::Error),
    Json(serde_json::Error),
    Csv(csv::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::NonFiniteFeature => write!(f, "non-finite feature"),
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::UndefinedCosine => write!(f, "undefined cosine"),
            Error::InvalidRatio(r) => write!(f, "selection ratio {r} outside [0, 1]"),
            Error::InsufficientNormalSnippets {
                requested,
                available,
            } => write!(
                f,
                "insufficient normal snippets: requested {requested}, available {available}"
            ),
            Error::EmptySelection => write!(f, "empty selection"),
            Error::DegenerateBatch => write!(f, "degenerate batch statistics"),
            Error::ModeMismatch => write!(f, "forward cache mode mismatch"),
            Error::UndefinedAuc => write!(f, "undefined AUC"),
            Error::NoPositives => write!(f, "average precision undefined without positives"),
            Error::MissingSnippetLabels => write!(f, "evaluation requires snippet labels"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
            Error::Csv(e) => write!(f, "csv error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            Error::Csv(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}
