//! Pairwise consistency maximization over inter-robot loop-closure
//! candidates.
//!
//! Two candidates between the same pair of robots are mutually consistent
//! when the loop they close (first closure, odometry on one robot, inverse
//! of the second closure, odometry back on the other robot) composes to a
//! transform indistinguishable from identity under the accumulated
//! measurement covariance. The largest mutually consistent subset is found
//! as a maximum clique of the pairwise consistency graph; everything outside
//! that clique is rejected.
//!
//! The consistency gate is the chi-squared quantile at the configured
//! likelihood threshold with six degrees of freedom, so under honest
//! covariances an inlier pair passes with probability equal to the
//! threshold. Smaller thresholds are stricter.

use crate::chi2::chi2_quantile;
use crate::clique::{max_clique, MaxCliqueResult};
use crate::error::{Error, Result};
use crate::graph::{odometric_relative, EdgeKind, GlobalKey, MeasurementEdge, PoseGraph};
use crate::se3::{
    compose, compose_covariance, inverse, log_map, mahalanobis_sq, propagate_covariance,
    Covariance6, Pose3,
};

pub const CONSISTENCY_DOF: u32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct PcmConfig {
    /// Probability mass below the acceptance gate; an honestly calibrated
    /// inlier pair is accepted with exactly this probability.
    pub likelihood_threshold: f64,
    /// Largest candidate count handed to the exact clique solver.
    pub exact_cap: usize,
}

impl Default for PcmConfig {
    fn default() -> Self {
        Self {
            likelihood_threshold: 0.01,
            exact_cap: 60,
        }
    }
}

impl PcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.likelihood_threshold > 0.0 && self.likelihood_threshold < 1.0) {
            return Err(Error::InvalidConfig {
                message: format!(
                    "likelihood_threshold must lie in (0, 1), got {}",
                    self.likelihood_threshold
                ),
            });
        }
        if self.exact_cap == 0 {
            return Err(Error::InvalidConfig {
                message: "exact_cap must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Result of inlier selection over one candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmOutcome {
    /// Indices into the candidate slice, ascending.
    pub inlier_indices: Vec<usize>,
    /// False when the clique came from the uncertified heuristic.
    pub certified: bool,
    /// Squared-distance acceptance gate actually used.
    pub gate: f64,
    /// Per candidate, the mean squared consistency distance against every
    /// other candidate (0.0 when the set has a single candidate).
    pub mean_distances: Vec<f64>,
}

/// A candidate oriented so its transform maps the lower-id robot's frame to
/// the higher-id robot's frame.
struct Oriented {
    low_keyframe: u64,
    high_keyframe: u64,
    pose: Pose3,
    covariance: Covariance6,
}

fn orient(edge: &MeasurementEdge, low_robot: u8, high_robot: u8) -> Result<Oriented> {
    if edge.kind != EdgeKind::InterRobotLoopClosure {
        return Err(Error::KeyMismatch {
            message: format!(
                "consistency candidates must be inter-robot loop closures, got {:?} -> {:?}",
                edge.from, edge.to
            ),
        });
    }
    let covariance = edge.covariance()?;
    if edge.from.robot_id == low_robot && edge.to.robot_id == high_robot {
        Ok(Oriented {
            low_keyframe: edge.from.keyframe_index,
            high_keyframe: edge.to.keyframe_index,
            pose: edge.relative_pose.clone(),
            covariance,
        })
    } else if edge.from.robot_id == high_robot && edge.to.robot_id == low_robot {
        Ok(Oriented {
            low_keyframe: edge.to.keyframe_index,
            high_keyframe: edge.from.keyframe_index,
            pose: inverse(&edge.relative_pose),
            covariance: propagate_covariance(&edge.relative_pose, &covariance),
        })
    } else {
        Err(Error::KeyMismatch {
            message: format!(
                "candidate {} -> {} does not connect robots {low_robot} and {high_robot}",
                edge.from, edge.to
            ),
        })
    }
}

/// Odometric relative pose between two keyframes of the same robot, in
/// either index order, with transported covariance.
fn chain(graph: &PoseGraph, from: u64, to: u64) -> Result<(Pose3, Covariance6)> {
    let key = |k: u64| GlobalKey {
        robot_id: graph.owner,
        keyframe_index: k,
    };
    if from <= to {
        odometric_relative(graph, key(from), key(to))
    } else {
        let (pose, cov) = odometric_relative(graph, key(to), key(from))?;
        let transported = propagate_covariance(&pose, &cov);
        Ok((inverse(&pose), transported))
    }
}

fn sorted_graphs<'a>(
    graph_a: &'a PoseGraph,
    graph_b: &'a PoseGraph,
) -> Result<(&'a PoseGraph, &'a PoseGraph)> {
    if graph_a.owner == graph_b.owner {
        return Err(Error::KeyMismatch {
            message: format!("consistency needs two distinct robots, got {}", graph_a.owner),
        });
    }
    if graph_a.owner < graph_b.owner {
        Ok((graph_a, graph_b))
    } else {
        Ok((graph_b, graph_a))
    }
}

/// Squared Mahalanobis distance of the loop formed by two candidates.
///
/// A residual whose rotation falls on the logarithm's cut locus cannot be
/// scored; it is reported as infinitely inconsistent rather than an error,
/// since only gross outliers land there.
pub fn pairwise_consistency_distance(
    graph_a: &PoseGraph,
    graph_b: &PoseGraph,
    first: &MeasurementEdge,
    second: &MeasurementEdge,
) -> Result<f64> {
    let (low_graph, high_graph) = sorted_graphs(graph_a, graph_b)?;
    let ci = orient(first, low_graph.owner, high_graph.owner)?;
    let cj = orient(second, low_graph.owner, high_graph.owner)?;

    // Loop: inverse of the second closure, odometry on the low robot from
    // the second anchor to the first, the first closure, odometry on the
    // high robot back to the second anchor. Consistent candidates compose
    // to identity.
    let mut mean = inverse(&cj.pose);
    let mut cov = propagate_covariance(&cj.pose, &cj.covariance);

    let (low_pose, low_cov) = chain(low_graph, cj.low_keyframe, ci.low_keyframe)?;
    cov = compose_covariance(&cov, &low_pose, &low_cov);
    mean = compose(&mean, &low_pose);

    cov = compose_covariance(&cov, &ci.pose, &ci.covariance);
    mean = compose(&mean, &ci.pose);

    let (high_pose, high_cov) = chain(high_graph, ci.high_keyframe, cj.high_keyframe)?;
    cov = compose_covariance(&cov, &high_pose, &high_cov);
    mean = compose(&mean, &high_pose);

    let residual = match log_map(&mean) {
        Ok(twist) => twist,
        Err(Error::AngleNearPi { .. }) => return Ok(f64::INFINITY),
        Err(other) => return Err(other),
    };
    mahalanobis_sq(&residual, &cov)
}

/// Dense pairwise consistency adjacency under the given squared-distance
/// gate, plus per-candidate mean distances.
///
/// Each unordered pair is scored once, in ascending index order; the
/// reversed traversal would differ only at higher order in the loop
/// residual, and scoring each pair once keeps the adjacency symmetric.
pub fn build_consistency_graph(
    graph_a: &PoseGraph,
    graph_b: &PoseGraph,
    candidates: &[MeasurementEdge],
    gate: f64,
) -> Result<(Vec<Vec<bool>>, Vec<f64>)> {
    let n = candidates.len();
    let mut adjacency = vec![vec![false; n]; n];
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = pairwise_consistency_distance(graph_a, graph_b, &candidates[i], &candidates[j])?;
            if d <= gate {
                adjacency[i][j] = true;
                adjacency[j][i] = true;
            }
            sums[i] += d;
            sums[j] += d;
        }
    }
    let mean_distances = sums
        .iter()
        .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
        .collect();
    Ok((adjacency, mean_distances))
}

/// Selects the largest mutually consistent candidate subset.
///
/// With zero candidates the result is empty; a single candidate is
/// trivially consistent with itself and accepted.
pub fn select_inliers(
    graph_a: &PoseGraph,
    graph_b: &PoseGraph,
    candidates: &[MeasurementEdge],
    config: &PcmConfig,
) -> Result<PcmOutcome> {
    config.validate()?;
    let gate = chi2_quantile(config.likelihood_threshold, CONSISTENCY_DOF)?;
    if candidates.is_empty() {
        return Ok(PcmOutcome {
            inlier_indices: Vec::new(),
            certified: true,
            gate,
            mean_distances: Vec::new(),
        });
    }
    let (adjacency, mean_distances) = build_consistency_graph(graph_a, graph_b, candidates, gate)?;
    let MaxCliqueResult { members, certified } = max_clique(&adjacency, config.exact_cap);
    Ok(PcmOutcome {
        inlier_indices: members,
        certified,
        gate,
        mean_distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GlobalKey;
    use crate::se3::rotation_exp;
    use nalgebra::{Matrix6, Vector3};

    const ODOM_INFO_SCALE: f64 = 1.0e4;

    /// Straight-line graph for `robot`: keyframes 0..=len at unit x spacing,
    /// identity rotations, offset `y` in world frame.
    fn line_graph(robot: u8, len: u64) -> PoseGraph {
        let mut graph = PoseGraph::new(robot);
        let info = Matrix6::identity() * ODOM_INFO_SCALE;
        graph.poses.insert(
            GlobalKey::new(robot, 0).unwrap(),
            Pose3::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, robot as f64, 0.0)),
        );
        for k in 0..len {
            let step = Pose3::new(nalgebra::Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
            graph
                .add_odometry(MeasurementEdge {
                    from: GlobalKey::new(robot, k).unwrap(),
                    to: GlobalKey::new(robot, k + 1).unwrap(),
                    relative_pose: step.clone(),
                    information: info,
                    kind: EdgeKind::Odometry,
                })
                .unwrap();
            let prev = graph.poses[&GlobalKey::new(robot, k).unwrap()].clone();
            graph
                .poses
                .insert(GlobalKey::new(robot, k + 1).unwrap(), compose(&prev, &step));
        }
        graph
    }

    /// Ground-truth closure between keyframe `i` of robot 0 and `j` of
    /// robot 1, optionally displaced by `offset` in the target frame.
    fn closure(i: u64, j: u64, offset: Vector3<f64>) -> MeasurementEdge {
        MeasurementEdge {
            from: GlobalKey::new(0, i).unwrap(),
            to: GlobalKey::new(1, j).unwrap(),
            relative_pose: Pose3::new(
                nalgebra::Matrix3::identity(),
                Vector3::new(j as f64 - i as f64, 1.0, 0.0) + offset,
            ),
            information: Matrix6::identity() * ODOM_INFO_SCALE,
            kind: EdgeKind::InterRobotLoopClosure,
        }
    }

    #[test]
    fn noiseless_consistent_pair_scores_near_zero() {
        let a = line_graph(0, 6);
        let b = line_graph(1, 6);
        let z1 = closure(0, 0, Vector3::zeros());
        let z2 = closure(2, 3, Vector3::zeros());
        let d = pairwise_consistency_distance(&a, &b, &z1, &z2).unwrap();
        assert!(d < 1.0e-9, "got {d}");
    }

    #[test]
    fn ten_meter_disagreement_scores_past_a_thousand() {
        let a = line_graph(0, 6);
        let b = line_graph(1, 6);
        let z1 = closure(0, 0, Vector3::zeros());
        let z2 = closure(2, 3, Vector3::new(10.0, 0.0, 0.0));
        let d = pairwise_consistency_distance(&a, &b, &z1, &z2).unwrap();
        assert!(d > 1.0e3, "got {d}");
    }

    #[test]
    fn argument_order_matters_only_at_higher_order_in_the_residual() {
        let a = line_graph(0, 6);
        let b = line_graph(1, 6);
        // The reversed loop is the conjugated inverse of the forward loop,
        // but first-order covariance accumulation linearizes around
        // different means, so the two scores agree only up to terms of
        // higher order in the loop residual. Shrinking the residual by 10x
        // must shrink the relative gap by about 10x as well.
        let mut gaps = Vec::new();
        for scale in [1.0e-2, 1.0e-3] {
            let z1 = closure(1, 0, Vector3::new(3.0 * scale, -1.0 * scale, 0.5 * scale));
            let z2 = closure(4, 5, Vector3::new(-2.0 * scale, 4.0 * scale, 0.0));
            let d12 = pairwise_consistency_distance(&a, &b, &z1, &z2).unwrap();
            let d21 = pairwise_consistency_distance(&a, &b, &z2, &z1).unwrap();
            assert!(d12 > 0.0 && d21 > 0.0);
            gaps.push((d12 - d21).abs() / d12.max(d21));
        }
        assert!(gaps[0] < 0.05, "relative gap {} at 1e-2 scale", gaps[0]);
        assert!(
            gaps[1] < 0.2 * gaps[0].max(1.0e-12),
            "gap did not shrink with the residual: {gaps:?}"
        );
    }

    #[test]
    fn flipping_a_candidate_edge_does_not_change_the_distance() {
        let a = line_graph(0, 6);
        let b = line_graph(1, 6);
        let z1 = closure(0, 0, Vector3::new(0.2, 0.1, -0.3));
        let z2 = closure(2, 3, Vector3::zeros());

        let cov = z1.covariance().unwrap();
        let flipped_cov = propagate_covariance(&z1.relative_pose, &cov);
        let flipped = MeasurementEdge {
            from: z1.to,
            to: z1.from,
            relative_pose: inverse(&z1.relative_pose),
            information: flipped_cov.try_inverse().unwrap(),
            kind: EdgeKind::InterRobotLoopClosure,
        };

        let d = pairwise_consistency_distance(&a, &b, &z1, &z2).unwrap();
        let d_flip = pairwise_consistency_distance(&a, &b, &flipped, &z2).unwrap();
        assert!((d - d_flip).abs() <= 1.0e-8 * d.max(1.0), "{d} vs {d_flip}");
    }

    #[test]
    fn residual_on_the_rotation_cut_locus_is_infinitely_inconsistent() {
        let a = line_graph(0, 6);
        let b = line_graph(1, 6);
        let z1 = closure(0, 0, Vector3::zeros());
        let mut z2 = closure(2, 3, Vector3::zeros());
        z2.relative_pose.rotation =
            rotation_exp(&Vector3::new(0.0, 0.0, std::f64::consts::PI)) * z2.relative_pose.rotation;
        let d = pairwise_consistency_distance(&a, &b, &z1, &z2).unwrap();
        assert!(d.is_infinite());
    }

    #[test]
    fn mixed_candidates_keep_exactly_the_consistent_block() {
        let a = line_graph(0, 12);
        let b = line_graph(1, 12);
        let mut candidates = Vec::new();
        // Indices 0, 2, 3, 5, 6 are exact; 1, 4, 7 disagree wildly and
        // mutually (distinct offsets).
        candidates.push(closure(0, 0, Vector3::zeros()));
        candidates.push(closure(1, 2, Vector3::new(5.0, 0.0, 0.0)));
        candidates.push(closure(2, 3, Vector3::zeros()));
        candidates.push(closure(4, 4, Vector3::zeros()));
        candidates.push(closure(5, 7, Vector3::new(0.0, -8.0, 0.0)));
        candidates.push(closure(6, 6, Vector3::zeros()));
        candidates.push(closure(8, 9, Vector3::zeros()));
        candidates.push(closure(10, 10, Vector3::new(0.0, 0.0, 12.0)));

        let outcome = select_inliers(
            &a,
            &b,
            &candidates,
            &PcmConfig {
                likelihood_threshold: 0.5,
                exact_cap: 60,
            },
        )
        .unwrap();
        assert_eq!(outcome.inlier_indices, vec![0, 2, 3, 5, 6]);
        assert!(outcome.certified);
    }

    #[test]
    fn empty_and_singleton_candidate_sets() {
        let a = line_graph(0, 3);
        let b = line_graph(1, 3);
        let none = select_inliers(&a, &b, &[], &PcmConfig::default()).unwrap();
        assert!(none.inlier_indices.is_empty());

        let one = vec![closure(0, 0, Vector3::new(4.0, 4.0, 4.0))];
        let outcome = select_inliers(&a, &b, &one, &PcmConfig::default()).unwrap();
        assert_eq!(outcome.inlier_indices, vec![0]);
        assert_eq!(outcome.mean_distances, vec![0.0]);
    }

    #[test]
    fn loosening_the_threshold_never_drops_edges_or_shrinks_the_clique() {
        let a = line_graph(0, 10);
        let b = line_graph(1, 10);
        let mut candidates = Vec::new();
        // Moderate perturbations so different gates genuinely disagree.
        let offsets = [
            (0u64, 0u64, 0.00), (1, 2, 0.02), (2, 1, 0.05), (3, 4, 0.08),
            (4, 3, 0.12), (5, 6, 0.20), (6, 5, 0.35), (7, 8, 0.60),
            (8, 7, 1.00), (9, 9, 1.80),
        ];
        for &(i, j, off) in &offsets {
            candidates.push(closure(i, j, Vector3::new(off, -off, off / 2.0)));
        }

        let thresholds = [0.01, 0.25, 0.5, 0.75, 0.95];
        let mut previous_adjacency: Option<Vec<Vec<bool>>> = None;
        let mut previous_clique = 0usize;
        for &p in &thresholds {
            let gate = chi2_quantile(p, CONSISTENCY_DOF).unwrap();
            let (adjacency, _) = build_consistency_graph(&a, &b, &candidates, gate).unwrap();
            if let Some(prev) = &previous_adjacency {
                for i in 0..candidates.len() {
                    for j in 0..candidates.len() {
                        assert!(
                            !prev[i][j] || adjacency[i][j],
                            "edge ({i},{j}) vanished as the gate loosened"
                        );
                    }
                }
            }
            let outcome = select_inliers(
                &a,
                &b,
                &candidates,
                &PcmConfig {
                    likelihood_threshold: p,
                    exact_cap: 60,
                },
            )
            .unwrap();
            assert!(outcome.inlier_indices.len() >= previous_clique);
            previous_clique = outcome.inlier_indices.len();
            previous_adjacency = Some(adjacency);
        }
    }

    #[test]
    fn mean_distances_match_direct_recomputation() {
        let a = line_graph(0, 8);
        let b = line_graph(1, 8);
        let candidates = vec![
            closure(0, 0, Vector3::zeros()),
            closure(2, 3, Vector3::new(0.4, 0.0, 0.0)),
            closure(5, 4, Vector3::new(0.0, 0.9, 0.0)),
        ];
        let outcome = select_inliers(&a, &b, &candidates, &PcmConfig::default()).unwrap();
        for i in 0..candidates.len() {
            let mut sum = 0.0;
            for j in 0..candidates.len() {
                if i == j {
                    continue;
                }
                // Scores use the ascending-index orientation.
                let (lo, hi) = (i.min(j), i.max(j));
                sum += pairwise_consistency_distance(&a, &b, &candidates[lo], &candidates[hi])
                    .unwrap();
            }
            let want = sum / (candidates.len() - 1) as f64;
            assert!((outcome.mean_distances[i] - want).abs() < 1.0e-9);
        }
    }

    #[test]
    fn candidate_order_cannot_change_a_unique_inlier_set() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha12Rng;

        let a = line_graph(0, 20);
        let b = line_graph(1, 20);
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for trial in 0..40 {
            // Inliers sit far inside the gate, outliers far outside and
            // mutually inconsistent, so the maximum clique is unique and the
            // selection must not depend on candidate order.
            let n_in = rng.gen_range(2..=6);
            let n_out = rng.gen_range(0..=4);
            let mut candidates = Vec::new();
            for c in 0..n_in {
                candidates.push(closure(2 * c, 2 * c, Vector3::zeros()));
            }
            for c in 0..n_out {
                let off = Vector3::new(
                    4.0 + 3.0 * c as f64,
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                candidates.push(closure(2 * c + 1, 2 * c + 1, off));
            }
            let config = PcmConfig {
                likelihood_threshold: 0.5,
                exact_cap: 60,
            };
            let baseline = select_inliers(&a, &b, &candidates, &config).unwrap();

            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<MeasurementEdge> =
                order.iter().map(|&i| candidates[i].clone()).collect();
            let permuted = select_inliers(&a, &b, &shuffled, &config).unwrap();
            let mut mapped: Vec<usize> =
                permuted.inlier_indices.iter().map(|&i| order[i]).collect();
            mapped.sort_unstable();
            assert_eq!(
                mapped, baseline.inlier_indices,
                "trial {trial}: order {order:?} changed the inlier set"
            );
            assert_eq!(permuted.certified, baseline.certified);
        }
    }

    #[test]
    fn candidates_must_connect_the_given_robot_pair() {
        let a = line_graph(0, 3);
        let b = line_graph(1, 3);
        let mut bad = closure(0, 0, Vector3::zeros());
        bad.to = GlobalKey::new(2, 0).unwrap();
        let err = select_inliers(&a, &b, &[bad, closure(1, 1, Vector3::zeros())], &PcmConfig::default());
        assert!(matches!(err, Err(Error::KeyMismatch { .. })));
    }
}
