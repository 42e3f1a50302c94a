//! Multi-robot pose-graph back end: rigid-body math, loop-closure
//! consistency checking, distributed optimization, and the simulation
//! pieces (synthetic worlds, descriptor exchange, byte-metered networking)
//! used to exercise them.
//!
//! Everything here is deterministic given a seed: collections iterate in
//! key order and random draws go through explicitly seeded generators, so
//! identical runs produce identical artifacts byte for byte.

pub mod chi2;
pub mod clique;
pub mod error;
pub mod frontend;
pub mod g2o;
pub mod metrics;
pub mod graph;
pub mod network;
pub mod pcm;
pub mod pgo;
pub mod se3;
pub mod world;

pub use error::{Error, Result};
