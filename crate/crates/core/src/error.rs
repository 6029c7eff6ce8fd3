use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid maze: {0}")]
    InvalidMaze(String),

    #[error("maze `{0}` has no free cell")]
    NoFreeCell(String),

    #[error("unknown built-in maze `{0}` (expected umaze, medium or large)")]
    UnknownMaze(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("truncated data for episode {episode} at byte {offset}")]
    TruncatedEpisode { episode: usize, offset: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("episode of length {len} is shorter than the minimum crop length {min}")]
    EpisodeTooShort { len: usize, min: usize },

    #[error("training diverged at step {step}: loss {loss} above threshold for {window} consecutive steps")]
    Diverged { step: usize, loss: f64, window: usize },

    #[error("rejection sampling gave up after {0} attempts")]
    RetryCapExceeded(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
