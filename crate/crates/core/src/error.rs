use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset error in frame `{frame}`: {message}")]
    Frame { frame: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{0}: no valid pixels")]
    EmptyMask(&'static str),

    #[error("render output has no retained ray contributions")]
    MissingContributions,

    #[error("non-finite gradient for surfel {surfel}, parameter {param}")]
    NonFinite { surfel: usize, param: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn frame(frame: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Frame {
            frame: frame.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
