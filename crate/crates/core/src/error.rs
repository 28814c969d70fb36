use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CaclError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, CaclError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CaclError {
    let path = path.into();
    move |source| CaclError::Io { path, source }
}

pub(crate) fn invalid(msg: impl Into<String>) -> CaclError {
    CaclError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> CaclError {
    CaclError::Shape(msg.into())
}
