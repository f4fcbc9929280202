use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design space: {0}")]
    InvalidSpace(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config exceeds bank capacity: {0}")]
    ExceedsBank(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocab { id: usize, vocab_size: usize },

    #[error("non-finite loss at step {step} (config {config_hash}): {loss}")]
    NonFiniteLoss {
        step: usize,
        config_hash: String,
        loss: f64,
    },

    #[error("no feasible config under {constraint_ms} ms")]
    Infeasible { constraint_ms: f64 },

    #[error("space too large for enumeration: {0} configs")]
    SpaceTooLarge(String),

    #[error("measurement failed: {0}")]
    Measurement(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpace(_) => "invalid_space",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ExceedsBank(_) => "exceeds_bank",
            Error::InvalidInput(_) => "invalid_input",
            Error::OutOfVocab { .. } => "out_of_vocab",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Infeasible { .. } => "infeasible",
            Error::SpaceTooLarge(_) => "space_too_large",
            Error::Measurement(_) => "measurement",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
