//! Batch experiment tooling around the peerslam core: scenario simulation,
//! parameter sweeps, direct g2o solving, and report digests.

pub mod artifacts;
pub mod config;
pub mod run;
pub mod solve;

/// Errors surfaced by the command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("unknown sweep parameter {name:?}; valid parameters: pcm_threshold, descriptor_match_threshold, min_correspondences")]
    UnknownParameter { name: String },

    #[error("io: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] peerslam_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
