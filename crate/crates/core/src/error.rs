use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("every position is ignored; the loss is empty")]
    EmptyLoss,

    #[error("target {target} at position {position} is outside [0, {vocab})")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },

    #[error("invalid model config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    TokenRange { id: usize, size: usize },

    #[error("byte {0:#04x} has no token in the vocabulary")]
    UnknownByte(u8),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("gradient norm is not finite ({0})")]
    NonFiniteGradNorm(f64),

    #[error("loss became non-finite ({loss}) at step {step}, tokens_seen {tokens_seen}")]
    NonFiniteLoss {
        loss: f64,
        step: u64,
        tokens_seen: u64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error("run config: {}", .0.join("; "))]
    RunConfig(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
