use std::path::PathBuf;

/// Errors produced anywhere in the deblurring pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("gradient oracle error: {0}")]
    GradCheck(String),

    #[error("kernel synthesis failed: {0}")]
    Synthesis(String),

    #[error("kernel normalization failed: {0}")]
    Normalization(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degradation error: {0}")]
    Degradation(String),

    #[error("unsupported image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
