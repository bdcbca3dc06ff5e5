use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, invalid parameters, unknown config keys.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A value on the differentiation tape overflowed or became NaN.
    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("rollout failed at step {step} (t = {time:.6}): {reason}")]
    Rollout {
        step: usize,
        time: f64,
        reason: String,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        /// Parameters from the last iteration whose objective was finite.
        last_good: Box<crate::valuefn::ValueFnParams>,
    },

    #[error("baseline failed: {0}")]
    Baseline(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Short machine-parseable category used by the command-line driver.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Dimension { .. } => "config",
            Error::NonFinite { .. } => "nonfinite",
            Error::Rollout { .. } => "rollout",
            Error::Sample { source, .. } => source.category(),
            Error::Diverged { .. } => "diverged",
            Error::Baseline(_) => "baseline",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Serde(_) => "format",
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
