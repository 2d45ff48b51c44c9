use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate embedding: norm {0:e} is below the normalization floor")]
    DegenerateEmbedding(f64),

    #[error("empty features: {0}")]
    EmptyFeatures(String),

    #[error("unsupported audio: field `{field}`: {detail}")]
    UnsupportedAudio { field: &'static str, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("dataset shape: {0}")]
    DatasetShape(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
