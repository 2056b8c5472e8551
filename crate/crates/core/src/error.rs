use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("function is not deterministic: {0}")]
    Nondeterminism(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sentence too short: {len} tokens, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),
    #[error("sentence of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("degenerate confidence at rank {0}")]
    DegenerateConfidence(usize),
    #[error("sequences are identical, no differing span")]
    NoDiff,
    #[error("incompatible checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("{path}: {source}")]
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
}
