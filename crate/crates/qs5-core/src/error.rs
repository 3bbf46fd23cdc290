use thiserror::Error;

#[derive(Debug, Error)]
pub enum QssmError {
    #[error("non-finite value in input tensor")]
    NonFiniteInput,
    #[error("bit width {0} outside supported range 1..=16")]
    InvalidBits(u32),
    #[error("int32 accumulator overflow in integer dot product")]
    AccumulatorOverflow,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("singular discretization: Lambda[{0}] = 0")]
    SingularDiscretization(usize),
    #[error("invalid quantization config '{name}': {reason}")]
    BadQuantConfig { name: String, reason: String },
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("non-finite state at integration step {0}")]
    NonFiniteState(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QssmError>;
