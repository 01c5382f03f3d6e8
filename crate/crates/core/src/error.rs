use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation matrix is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid dynamics: {0}")]
    InvalidDynamics(String),
    #[error("degenerate 6D rotation input: columns parallel or near zero")]
    DegenerateRotationInput,
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("scene has no frames")]
    EmptyScene,
    #[error("scene set is empty")]
    EmptySceneSet,
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("invalid ablation axis: {0}")]
    InvalidAxis(String),
    #[error("results and ground truth cover different frames: {0}")]
    FrameSetMismatch(String),
    #[error("checkpoint config hash {found} does not match config hash {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
