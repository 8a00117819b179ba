use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to locate the
/// failing operation without a debugger.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: String, index: usize },

    #[error("tensor: {0}")]
    Tensor(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("camera: {0}")]
    Camera(String),

    #[error("point {index} has depth {depth} behind or too close to the camera")]
    BehindCamera { index: usize, depth: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
