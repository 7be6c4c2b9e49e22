use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch{}: {detail}", layer_suffix(*.layer))]
    Shape { layer: Option<usize>, detail: String },

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("activation record is missing {0}; run the required pass first")]
    MissingPass(&'static str),

    #[error("signal requires {0} which the derivative record does not carry")]
    MissingDerivative(&'static str),

    #[error("layer {layer} ({kind}) is not supported by {op}")]
    UnsupportedLayer { layer: usize, kind: &'static str, op: &'static str },

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("unknown signal `{name}`; did you mean: {}", .suggestions.join(", "))]
    UnknownSignal { name: String, suggestions: Vec<String> },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("channel ({layer}, {channel}) is already pruned")]
    AlreadyPruned { layer: usize, channel: usize },

    #[error("channel ({layer}, {channel}) does not exist")]
    NoSuchChannel { layer: usize, channel: usize },

    #[error("malformed {format} file at byte {offset}: {detail}")]
    Format { format: &'static str, offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {inner}")]
    Step { context: String, inner: Box<Error> },

    #[error("{}: {cause}", .path.display())]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!(" at layer {l}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(layer: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Shape { layer, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause }
    }

    /// Wraps the error with a description of the step that failed.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Step { context: context.into(), inner: Box::new(self) }
    }
}
