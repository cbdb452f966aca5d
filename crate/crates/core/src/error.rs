use thiserror::Error;

/// Errors raised anywhere in the training pipeline.
#[derive(Debug, Error)]
pub enum HapoError {
    /// Invalid task, policy, sampler or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Batch statistics could not be computed (e.g. empty input).
    #[error("statistics error: {0}")]
    Statistics(String),

    /// A normalization unit has zero reward variance.
    #[error("degenerate group: {0}")]
    Degenerate(String),

    /// Non-finite values or empty batches during optimization.
    #[error("training error: {0}")]
    Training(String),

    /// Exhaustive enumeration refused because the search space is too large.
    #[error("search space too large: {0} sequences")]
    SearchSpace(u128),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl HapoError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HapoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, message: impl ToString) -> Self {
        HapoError::Parse {
            path: path.as_ref().display().to_string(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by user configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, HapoError::Config(_) | HapoError::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, HapoError>;
