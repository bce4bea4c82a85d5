use thiserror::Error;

/// Errors produced by the tree, message-passing, sampling and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A phylogeny violates one of its structural invariants.
    #[error("invalid tree: {0}")]
    InvalidTree(String),

    /// A numeric argument lies outside the domain of the operation.
    #[error("{what} = {value} is outside {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A vertex, leaf or branch identifier does not resolve in the tree.
    #[error("unknown {kind} {id}")]
    Lookup { kind: &'static str, id: usize },

    #[error("expected {expected} leaf factors, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("operation needs at least {min} leaves, tree has {got}")]
    Size { min: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// An attachment posterior was evaluated against a tree it was not built for.
    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed binary input at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("callback aborted the run: {0}")]
    Callback(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64, domain: impl Into<String>) -> Self {
        Error::Domain {
            what,
            value,
            domain: domain.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
