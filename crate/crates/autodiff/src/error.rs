use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; build a new graph before differentiating again")]
    BackwardTwice,
    #[error("gradients already accumulated into parameter set `{0}`; call step or zero_grad first")]
    DoubleAccumulation(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AdError> = std::result::Result<T, E>;
