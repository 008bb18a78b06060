use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("integration blew up at t = {time} (non-finite state)")]
    Blowup { time: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("series too short: need {needed} snapshots, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("rank-deficient least-squares system (column {column})")]
    RankDeficient { column: usize },

    #[error("correction horizon exceeded: l = {requested} > {horizon}")]
    HorizonExceeded { requested: usize, horizon: usize },

    #[error("non-finite {what} at cycle {cycle}")]
    NonFinite { what: &'static str, cycle: usize },

    #[error("assimilation diverged at cycle {cycle}: sRMSE {srmse:.3} stayed above threshold")]
    Divergence { cycle: usize, srmse: f64 },

    #[error("training halted: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
