use std::path::PathBuf;

/// Errors produced anywhere in the restoration, training and curation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: LoadError },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },

    #[error("token budget exceeded: {tokens} tokens > budget {budget}")]
    Capacity { tokens: usize, budget: usize },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("scorer `{scorer}` failed: {message}")]
    Scorer { scorer: String, message: String },

    #[error("refusing to overwrite existing output {0} (pass force to replace it)")]
    Exists(PathBuf),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Structured reasons a frame directory could not be read.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoadError {
    #[error("missing meta.json")]
    MissingMeta,
    #[error("malformed meta.json: {0}")]
    BadMeta(String),
    #[error("no frames found")]
    NoFrames,
    #[error("frame numbering gap: expected {expected:06}, found {found:06}")]
    NumberingGap { expected: usize, found: usize },
    #[error("frame {index:06} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    InconsistentShape {
        index: usize,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("frame count {found} does not match meta frame_count {declared}")]
    CountMismatch { declared: usize, found: usize },
    #[error("decode failure in frame {index:06}: {message}")]
    Decode { index: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
