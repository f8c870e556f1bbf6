use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("no interactions")]
    Empty,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("empty after k-core (min_count {0})")]
    EmptyAfterKCore(usize),
    #[error("split file {0} is missing or unreadable: {1}")]
    MissingSplit(String, #[source] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("item id {id} out of range (vocabulary has {count} items)")]
    IdOutOfRange { id: usize, count: usize },
    #[error("perturbed branch requested but adversarial calibrator is disabled")]
    PerturbedWithoutAdversarial,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, step {step}: {diagnostics}")]
    NonFinite {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },
    #[error("no training examples")]
    NoData,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no evaluation examples")]
    NoData,
    #[error("bucket edges must be ascending")]
    BadEdges,
}
