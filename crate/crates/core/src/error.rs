use thiserror::Error;

/// Errors raised by the search, embedding and indexing routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coincident points: distance {distance:e} is below the degeneracy tolerance")]
    CoincidentPoints { distance: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("unknown object id {id} (catalog has {n} objects)")]
    UnknownObject { id: usize, n: usize },

    #[error("all objects are excluded")]
    AllExcluded,

    #[error("fewer than two unused objects remain")]
    NotEnoughObjects,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unreachable flip rate {target}: achievable range is ({low}, {high})")]
    UnreachableFlipRate { target: f64, low: f64, high: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("session is not running")]
    SessionClosed,

    #[error("posterior mass underflow")]
    MassUnderflow,

    #[error("training diverged at epoch {epoch}: mean objective per triplet {objective}")]
    Diverged { epoch: usize, objective: f64 },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
