use thiserror::Error;

use crate::trace::TraceRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// AA* is singular or numerically rank deficient.
    #[error("constraint operator is rank deficient: {0}")]
    RankDeficient(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// A row of `Y + U` vanished during retraction.
    #[error("degenerate retraction: row {row} of block {block} has norm {norm:e}")]
    DegenerateRetraction { block: usize, row: usize, norm: f64 },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    /// Subproblem failure during an outer solve; carries the trace up to the failure.
    #[error("outer iteration {iteration} failed: {source}")]
    Solve {
        iteration: usize,
        #[source]
        source: Box<Error>,
        trace: Vec<TraceRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
