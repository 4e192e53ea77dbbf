use thiserror::Error;

/// Errors produced by the engine, the model builders, and the trainers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss is not a scalar (shape {0})")]
    NonScalarLoss(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training aborted at epoch {epoch} (lr {lr:.3e}): loss became non-finite")]
    TrainingDiverged { epoch: usize, lr: f64 },

    #[error("gradient descent diverged: loss increased over {window} consecutive steps (step {step}, loss {loss:.3e})")]
    DescentDiverged { step: usize, window: usize, loss: f64 },

    #[error("input {dim} = {size} not divisible by {divisor} (required by {depth} downsampling levels)")]
    NotDivisible {
        dim: &'static str,
        size: usize,
        divisor: usize,
        depth: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(axis: &'static str, expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::ShapeMismatch { axis, expected, got, context: context.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
