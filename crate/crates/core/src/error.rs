use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("SMILES error at byte {offset}: {message}")]
    Smiles { offset: usize, message: String },

    #[error("line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("pattern error: {0}")]
    Pattern(String),

    #[error("recipe error: {0}")]
    Recipe(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient for parameter '{param}'")]
    NonFiniteGradient { param: String },

    #[error("autodiff error: {0}")]
    Tape(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("training error at epoch {epoch}, batch {batch}: {source}")]
    Train {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

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

    /// True for failures caused by numerical trouble rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::NonFiniteGradient { .. } => true,
            Error::Train { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
