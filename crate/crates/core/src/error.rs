//! Error types shared across the simulator.

use std::path::PathBuf;

/// Errors produced while loading and partitioning interaction data.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no interactions after parsing {path}")]
    EmptyFile { path: PathBuf },
    #[error("no interactions survive the min-interaction filter")]
    AllFiltered,
    #[error("{interactions} interactions cannot populate {blocks} blocks")]
    TooFewInteractions { interactions: usize, blocks: usize },
    #[error("negative sampling for user {user}: no candidates outside the positive set")]
    NoNegativeCandidates { user: u32 },
}

/// Errors produced by model arithmetic and the federated protocol.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("item {item} is not registered in the item table")]
    UnknownItem { item: u32 },
    #[error("non-finite value encountered in {context} (training diverged; reduce the learning rate)")]
    NonFinite { context: &'static str },
    #[error("client {user} has no retained knowledge from the previous block")]
    NoRetainedKnowledge { user: u32 },
    #[error("item {item} missing from teacher scores")]
    MissingTeacherScore { item: u32 },
    #[error("cannot aggregate an empty upload list")]
    EmptyUploads,
    #[error("upload item index mismatch: expected {expected} rows, got {got}")]
    UploadIndexMismatch { expected: usize, got: usize },
    #[error("cannot sample clients from an empty user set")]
    EmptyUserSet,
    #[error("item {item} is outside the previous block's item set")]
    UnknownOldItem { item: u32 },
    #[error("every sampled client failed in round {round}")]
    RoundFailed { round: usize },
}

/// Errors produced by configuration validation and experiment orchestration.
#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write results to {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
