use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Principal-branch rotation logarithm requested within 1e-6 rad of pi,
    /// where the axis is numerically unrecoverable.
    #[error("rotation angle {angle} rad is within the cutoff window of pi; logarithm axis ill-conditioned")]
    AngleNearPi { angle: f64 },

    /// A covariance (or information) matrix failed the positive-definiteness
    /// gate: smallest eigenvalue must exceed 1e-12.
    #[error("covariance not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    SingularCovariance { min_eigenvalue: f64 },

    /// An odometry chain walk hit a keyframe with no outgoing edge.
    #[error("odometry chain of robot {robot} is missing the edge leaving keyframe {keyframe}")]
    MissingChainSegment { robot: u8, keyframe: u64 },

    /// Keyframe index does not fit the 56-bit field of a packed key.
    #[error("keyframe index {index} exceeds the 56-bit key field")]
    KeyframeIndexOverflow { index: u64 },

    /// Malformed g2o input.
    #[error("g2o parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Underlying stream failure while reading or writing.
    #[error("i/o failure: {message}")]
    Io { message: String },

    /// Chi-squared quantile probability outside the open interval (0, 1).
    #[error("chi-squared quantile probability {p} outside (0, 1)")]
    ChiSquaredDomain { p: f64 },

    /// The pose graph spanning the requested robots is not connected, so an
    /// anchored solve is not defined over it.
    #[error("pose graph is disconnected across the requested robots")]
    DisconnectedGraph,

    /// A protocol or optimization session lost a required communication link
    /// mid-session.
    #[error("communication lost between robots {a} and {b} at round {round}")]
    ConnectivityLost { a: u8, b: u8, round: u64 },

    /// Two keyed collections that must share a key set do not.
    #[error("key sets differ: {message}")]
    KeyMismatch { message: String },

    /// Vector length does not match the expected descriptor dimension.
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A configuration value failed validation.
    #[error("invalid configuration: {message}")]
    InvalidConfig { message: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            message: e.to_string(),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
