use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate transport plan: row {row} has zero mass")]
    DegeneratePlan { row: usize },

    #[error("instance too large for exhaustive search: n = {n} (max {max})")]
    TooLarge { n: usize, max: usize },

    #[error("{0}")]
    Config(String),

    #[error("cell (domain {domain}, class {class}) has {available} items, episode needs {needed}")]
    InsufficientCell {
        domain: usize,
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("split part `{part}` has {available} {axis}, episode needs {needed}")]
    InsufficientPart {
        part: &'static str,
        axis: &'static str,
        available: usize,
        needed: usize,
    },

    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("refusing to write into non-empty directory {0} (use --force)")]
    OutputExists(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
