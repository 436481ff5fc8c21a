//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Trajectory does not match the MDP shape (wrong length, action or
    /// prompt index out of range).
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),

    /// An exact enumeration was requested but the trajectory count exceeds
    /// the configured cap.
    #[error("enumeration needs {needed} trajectories, cap is {cap}")]
    CapExceeded { needed: u64, cap: u64 },

    /// A tabular policy or Q table was queried off its support.
    #[error("state not covered by table: {0}")]
    UnknownState(String),

    /// Vector or matrix dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation that needs data received an empty dataset.
    #[error("dataset is empty")]
    EmptyDataset,

    /// Appended preference samples would run backwards in iteration index.
    #[error("iteration order violation: new sample at iteration {new} behind existing {existing}")]
    IterationOrderViolation { new: i64, existing: i64 },

    /// Oracle-labeled generation was requested without a ground-truth reward.
    #[error("oracle labeling requested but no ground-truth reward was supplied")]
    MissingOracle,

    /// A number that must stay finite became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Configuration failed validation.
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    /// A log-log fit received a point with a non-positive coordinate.
    #[error("rate fit needs strictly positive points, got ({x}, {y})")]
    NonPositivePoint { x: f64, y: f64 },

    /// Runs handed to `compare` were produced on incompatible setups.
    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),

    /// A persisted artifact or dataset failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
