use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("world construction failed: {0}")]
    Construction(String),

    #[error("decoder pretraining failed: {0}")]
    Pretrain(String),

    #[error("modality absent: no {0} clients present")]
    ModalityAbsent(&'static str),

    #[error("contrastive scoring needs a batch of at least 2 records, got {0}")]
    ContrastiveDegenerate(usize),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("round {round}, phase {phase}: {source}")]
    Phase {
        round: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn in_phase(self, round: usize, phase: &'static str) -> Self {
        Error::Phase {
            round,
            phase,
            source: Box::new(self),
        }
    }
}
