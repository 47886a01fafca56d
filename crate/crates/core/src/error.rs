use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid skinning weights: {0}")]
    InvalidWeights(String),

    /// The blended skinning matrix cannot be inverted. Carries the nonzero
    /// `(joint, weight)` pairs of the offending blend.
    #[error("singular skinning blend (det = {det:.3e}) for weights {weights:?}")]
    SingularBlend { det: f64, weights: Vec<(usize, f64)> },

    #[error("mesh is not watertight: {0}")]
    NonWatertight(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },

    #[error("no overlapping valid pixels between the two frames")]
    NoOverlap,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("corrupt or incompatible file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Format(e.to_string())
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::config("config file", e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        }
    }
}
