use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or settings that can never work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data outside the accepted domain.
    #[error("input error: {0}")]
    Input(String),

    /// An internal invariant was broken (e.g. a fully masked attention row).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value in {location}")]
    Numerical { location: String },

    #[error("probe block {probe} is too close to a sequence boundary ({blocks} blocks, needs {needed_past} past / {needed_future} future)")]
    BoundaryProbe {
        probe: usize,
        blocks: usize,
        needed_past: usize,
        needed_future: usize,
    },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("condition source stalled for {millis} ms")]
    Stalled { millis: u128 },

    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
