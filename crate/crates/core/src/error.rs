use std::path::PathBuf;

use crate::tree::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty document")]
    EmptyDocument,

    #[error("malformed heading nesting at {heading:?}: level {level} follows level {previous}")]
    HeadingNesting {
        heading: String,
        level: usize,
        previous: usize,
    },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of {len} positions exceeds the context window of {ctx}")]
    ContextOverflow { len: usize, ctx: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("memory for node {child} is not available when building node {parent}")]
    OrderingViolation { parent: NodeId, child: NodeId },

    #[error("no cached memory for node {0}")]
    MissingMemory(NodeId),

    #[error("gold child {child} is not a child of {parent}")]
    BadSupervision { parent: NodeId, child: NodeId },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("{what} hash mismatch: cache has {found}, expected {expected}")]
    HashMismatch {
        what: &'static str,
        found: String,
        expected: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
