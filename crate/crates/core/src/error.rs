use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum CsdError {
    /// An argument lies outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A non-finite value appeared; `index` names the offending particle.
    #[error("non-finite {what} at particle {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration field failed validation. `path` is a dotted field path.
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Optimization produced a non-finite particle at `step`.
    #[error("numeric abort at step {step}: {source}")]
    NumericAbort {
        step: usize,
        #[source]
        source: Box<CsdError>,
    },

    #[error("bridge timeout after {0} ms")]
    Timeout(u64),

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Error string reported by a remote oracle, surfaced verbatim.
    #[error("server error: {0}")]
    Server(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CsdError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CsdError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures a caller may retry unchanged.
    pub fn is_retryable(&self) -> bool {
        matches!(self, CsdError::Timeout(_))
    }
}

pub type Result<T> = std::result::Result<T, CsdError>;

pub(crate) fn check_dims(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(CsdError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
