//! Pose-graph data model shared by every robot.
//!
//! Keys pack `(robot id, keyframe index)` into a single `u64` so vertices
//! survive file round-trips and cross-robot exchange without a side table.
//! Edges store the *information* matrix (inverse covariance); consumers that
//! need a covariance invert once at use time.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::se3::{self, Covariance6, Pose3};

/// Number of bits reserved for the keyframe index inside a packed key.
pub const KEYFRAME_BITS: u32 = 56;

/// Globally unique vertex key: robot id in the top byte, keyframe index in
/// the low 56 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlobalKey {
    pub robot_id: u8,
    pub keyframe_index: u64,
}

impl GlobalKey {
    pub fn new(robot_id: u8, keyframe_index: u64) -> Result<Self> {
        if keyframe_index >> KEYFRAME_BITS != 0 {
            return Err(Error::KeyframeIndexOverflow {
                index: keyframe_index,
            });
        }
        Ok(Self {
            robot_id,
            keyframe_index,
        })
    }

    /// Packed form: `(robot_id << 56) | keyframe_index`.
    pub fn encode(&self) -> u64 {
        ((self.robot_id as u64) << KEYFRAME_BITS) | self.keyframe_index
    }

    pub fn decode(raw: u64) -> Self {
        Self {
            robot_id: (raw >> KEYFRAME_BITS) as u8,
            keyframe_index: raw & ((1u64 << KEYFRAME_BITS) - 1),
        }
    }
}

impl core::fmt::Display for GlobalKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "r{}k{}", self.robot_id, self.keyframe_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Consecutive keyframes of one robot.
    Odometry,
    /// Place-recognition match between two robots.
    InterRobotLoopClosure,
}

/// Relative-pose measurement `from -> to` with its information matrix
/// (rotation block first, same ordering as [`crate::se3::Twist6`]).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEdge {
    pub from: GlobalKey,
    pub to: GlobalKey,
    pub relative_pose: Pose3,
    pub information: Covariance6,
    pub kind: EdgeKind,
}

impl MeasurementEdge {
    /// Covariance of the measurement: inverse of the stored information.
    pub fn covariance(&self) -> Result<Covariance6> {
        let sym = (self.information + self.information.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if !(min_eig > 1e-12) {
            return Err(Error::SingularCovariance {
                min_eigenvalue: min_eig,
            });
        }
        let mut inv = Covariance6::zeros();
        for i in 0..6 {
            let q = eig.eigenvectors.column(i);
            inv += q * q.transpose() / eig.eigenvalues[i];
        }
        Ok((inv + inv.transpose()) * 0.5)
    }
}

/// One robot's view of the world: its own trajectory estimate, its odometry
/// chain, and the inter-robot loop closures it has collected.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub owner: u8,
    /// Current pose estimates. May include copies of other robots' separator
    /// poses; iteration order is deterministic by key.
    pub poses: BTreeMap<GlobalKey, Pose3>,
    /// Odometry chain of the owner, keyed by the source keyframe index.
    pub odometry: BTreeMap<u64, MeasurementEdge>,
    pub loop_closures: Vec<MeasurementEdge>,
}

impl PoseGraph {
    pub fn new(owner: u8) -> Self {
        Self {
            owner,
            ..Self::default()
        }
    }

    /// Adds an odometry edge. The edge must belong to the owner and step the
    /// keyframe index forward by exactly one.
    pub fn add_odometry(&mut self, edge: MeasurementEdge) -> Result<()> {
        let ok = edge.kind == EdgeKind::Odometry
            && edge.from.robot_id == self.owner
            && edge.to.robot_id == self.owner
            && edge.to.keyframe_index == edge.from.keyframe_index + 1;
        if !ok {
            return Err(Error::InvalidConfig {
                message: format!(
                    "odometry edge {} -> {} does not extend robot {}'s chain",
                    edge.from, edge.to, self.owner
                ),
            });
        }
        self.odometry.insert(edge.from.keyframe_index, edge);
        Ok(())
    }

    pub fn add_loop_closure(&mut self, edge: MeasurementEdge) -> Result<()> {
        if edge.kind != EdgeKind::InterRobotLoopClosure || edge.from.robot_id == edge.to.robot_id {
            return Err(Error::InvalidConfig {
                message: format!(
                    "loop closure {} -> {} must connect two distinct robots",
                    edge.from, edge.to
                ),
            });
        }
        self.loop_closures.push(edge);
        Ok(())
    }

    /// Number of keyframes with a pose estimate owned by this robot.
    pub fn owned_pose_count(&self) -> usize {
        self.poses.keys().filter(|k| k.robot_id == self.owner).count()
    }
}

/// Relative pose and accumulated covariance between two keyframes of one
/// robot, computed purely from the odometry chain.
///
/// `from.keyframe_index <= to.keyframe_index` is required; the covariance is
/// the first-order accumulation of the per-edge covariances transported to
/// the final frame. Equal keys yield the identity with zero covariance.
pub fn odometric_relative(
    graph: &PoseGraph,
    from: GlobalKey,
    to: GlobalKey,
) -> Result<(Pose3, Covariance6)> {
    if from.robot_id != to.robot_id {
        return Err(Error::KeyMismatch {
            message: format!("odometric walk spans robots {} and {}", from, to),
        });
    }
    if from.keyframe_index > to.keyframe_index {
        return Err(Error::InvalidConfig {
            message: format!("odometric walk {} -> {} runs backwards", from, to),
        });
    }
    let mut pose = Pose3::identity();
    let mut cov = Covariance6::zeros();
    for k in from.keyframe_index..to.keyframe_index {
        let edge = graph
            .odometry
            .get(&k)
            .ok_or(Error::MissingChainSegment {
                robot: from.robot_id,
                keyframe: k,
            })?;
        let segment_cov = edge.covariance()?;
        cov = se3::compose_covariance(&cov, &edge.relative_pose, &segment_cov);
        pose = se3::compose(&pose, &edge.relative_pose);
    }
    Ok((pose, cov))
}
