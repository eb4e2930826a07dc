use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error at row {row}: {message}")]
    Ingest { row: u64, message: String },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("similarity model error: {0}")]
    Model(String),

    #[error("scoring error: {message}")]
    Scoring { message: String, raw: String },

    #[error("prediction error: {message}")]
    Prediction { message: String, transcript: Vec<String> },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stage `{stage}` has no cached artifact; run it first")]
    MissingStage { stage: String },

    #[error("stage `{stage}` artifact is stale (fingerprint {found}, expected {expected})")]
    StaleStage {
        stage: String,
        found: String,
        expected: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
