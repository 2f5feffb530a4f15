use thiserror::Error;

#[derive(Debug, Error)]
pub enum HahtError {
    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("every position is masked in {0}")]
    AllMasked(&'static str),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("target response contains no non-reserved tokens")]
    EmptyTarget,

    #[error("current session is empty")]
    EmptySession,

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HahtError> = std::result::Result<T, E>;
