use thiserror::Error;

use crate::checkpoint::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty attention row")]
    EmptyAttentionRow,

    #[error("modality missing: {0}")]
    ModalityMissing(String),

    #[error("ragged conversation: {0}")]
    RaggedConversation(String),

    #[error("bad label: {0}")]
    BadLabel(String),

    #[error("bad speaker: {0}")]
    BadSpeaker(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss function is nondeterministic: {0}")]
    Nondeterministic(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        checkpoint: Box<Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::ModalityMissing(_)
                | Error::RaggedConversation(_)
                | Error::BadLabel(_)
                | Error::BadSpeaker(_)
                | Error::Config(_)
                | Error::Invalid(_)
                | Error::EmptyDataset
                | Error::Format(_)
                | Error::Json(_)
        )
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
