//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Error`]. The variant tells you
//! which subsystem rejected the input; [`Error::module`] exposes that as a
//! short lowercase tag so front ends (the CLI in particular) can emit
//! machine-parsable `ERROR:<module>:<message>` lines.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus: {0}")]
    Corpus(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("numerics: {0}")]
    Numerics(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training: {0}")]
    Training(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("io ({path}): {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Subsystem tag for machine-parsable error lines.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Corpus(_) => "corpus",
            Error::Graph(_) => "graph",
            Error::Numerics(_) => "numerics",
            Error::Model(_) => "model",
            Error::Training(_) => "training",
            Error::Eval(_) => "eval",
            Error::Io { .. } => "io",
        }
    }

    /// Message without the module prefix.
    pub fn message(&self) -> String {
        match self {
            Error::Corpus(m)
            | Error::Graph(m)
            | Error::Numerics(m)
            | Error::Model(m)
            | Error::Training(m)
            | Error::Eval(m) => m.clone(),
            Error::Io { path, source } => format!("{path}: {source}"),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
