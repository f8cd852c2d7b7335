use thiserror::Error;

pub type Result<T> = std::result::Result<T, MergeError>;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("layer index {index} out of range 1..={layers}")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("layer {layer} has a non-identity activation; use linearize_downstream instead")]
    NonLinearActivation { layer: usize },

    #[error("residual updates refer to different layers ({first} and {other})")]
    MixedLayers { first: usize, other: usize },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("no residual updates supplied")]
    NoResiduals,

    #[error("basis is not orthonormal (max |QᵀQ - I| = {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("unsupported bundle version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MergeError {
    pub(crate) fn dims(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Self::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
