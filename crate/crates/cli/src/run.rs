//! End-to-end scenario execution: world generation, rendezvous scheduling,
//! consistency filtering, distributed optimization, and metrics.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use peerslam_core::frontend::{build_frontends, run_rendezvous, ClosureCandidate, FrontendPayload};
use peerslam_core::graph::{GlobalKey, MeasurementEdge, PoseGraph};
use peerslam_core::metrics::{ate, rejection_stats, RunReport};
use peerslam_core::network::{Bus, MessageCosts, TransmissionRecord};
use peerslam_core::pcm::select_inliers;
use peerslam_core::pgo::run_distributed_pgo;
use peerslam_core::se3::Pose3;
use peerslam_core::world::{generate, splitmix64, World};
use nalgebra::Vector3;

use crate::config::ScenarioConfig;
use crate::Result;

/// Stream tag separating the verification rng from the world's own streams.
const VERIFICATION_STREAM: u64 = 0x76657269;

/// Seed for one run: mixes the base seed with the run index so runs are
/// independent, while the same index always maps to the same world no
/// matter which sweep value is active.
pub fn run_seed(base_seed: u64, run_index: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(run_index.wrapping_add(1)))
}

/// One scored loop closure candidate of one run.
#[derive(Debug, Clone)]
pub struct CandidateRow {
    pub robot_a: u8,
    pub robot_b: u8,
    pub index_in_pair: usize,
    pub from: GlobalKey,
    pub to: GlobalKey,
    pub outlier_truth: bool,
    pub accepted: bool,
    /// Mean squared consistency distance against the pair's other
    /// candidates; absent when consistency checking was disabled.
    pub mean_distance_sq: Option<f64>,
}

/// One transmission, tagged by which subsystem's bus carried it.
#[derive(Debug, Clone)]
pub struct ByteRow {
    pub source: &'static str,
    pub record: TransmissionRecord,
}

/// Everything a single run produces, before anything is written to disk.
pub struct RunArtifacts {
    pub report: RunReport,
    pub estimates: BTreeMap<GlobalKey, Pose3>,
    pub accepted_closures: Vec<MeasurementEdge>,
    pub candidate_rows: Vec<CandidateRow>,
    pub byte_rows: Vec<ByteRow>,
    pub world: World,
    /// Translation error of dead reckoning from the true start poses, for
    /// comparisons against the optimized estimate.
    pub odometry_only_ate_m: f64,
}

fn pair_key(a: u8, b: u8) -> (u8, u8) {
    (a.min(b), a.max(b))
}

/// Dead-reckoned trajectory of every robot, integrated from its true start.
pub fn odometry_only_estimates(world: &World) -> BTreeMap<GlobalKey, Pose3> {
    let mut estimates = BTreeMap::new();
    for robot in &world.robots {
        for (key, pose) in &robot.graph.poses {
            estimates.insert(*key, pose.clone());
        }
    }
    estimates
}

fn ground_truth_map(world: &World) -> BTreeMap<GlobalKey, Pose3> {
    let mut truth = BTreeMap::new();
    for robot in &world.robots {
        for (kf, pose) in robot.ground_truth.iter().enumerate() {
            let key = GlobalKey {
                robot_id: robot.robot_id,
                keyframe_index: kf as u64,
            };
            truth.insert(key, pose.clone());
        }
    }
    truth
}

/// Executes one run of the scenario and returns its artifacts.
///
/// Robots walk their trajectories keyframe by keyframe; a pair exchanges
/// place descriptors when it first comes into communication range and again
/// every `rendezvous_interval` keyframes while it stays in range. Positions
/// are frozen for the five rounds of each exchange. Candidates are filtered
/// per robot pair, and the surviving closures feed one distributed solve
/// over in-range gather positions.
pub fn execute_run(config: &ScenarioConfig, run_index: u64, base_seed: u64) -> Result<RunArtifacts> {
    config.validate()?;
    let seed = run_seed(base_seed, run_index);

    let mut world_config = config.world.to_core();
    world_config.seed = seed;
    let world = generate(&world_config)?;

    let network = config.network.to_core();
    let frontend_config = config.frontend.to_core();
    let mut frontends = build_frontends(&world, &frontend_config)?;
    let mut graphs: BTreeMap<u8, PoseGraph> = world
        .robots
        .iter()
        .map(|r| (r.robot_id, r.graph.clone()))
        .collect();

    let mut bus: Bus<FrontendPayload> = Bus::new(network.comm_range, MessageCosts::default());
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ VERIFICATION_STREAM));

    let robot_ids: Vec<u8> = graphs.keys().copied().collect();
    let mut in_range_before: BTreeMap<(u8, u8), bool> = BTreeMap::new();
    let mut last_exchange_kf: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    let mut candidates_by_pair: BTreeMap<(u8, u8), Vec<ClosureCandidate>> = BTreeMap::new();

    for kf in 0..world_config.keyframes_per_robot {
        let positions = world.positions_at(kf);
        for (i, &a) in robot_ids.iter().enumerate() {
            for &b in &robot_ids[i + 1..] {
                let pair = pair_key(a, b);
                let in_range =
                    (positions[&a] - positions[&b]).norm() <= network.comm_range;
                let was_in_range = *in_range_before.get(&pair).unwrap_or(&false);
                in_range_before.insert(pair, in_range);
                if !in_range {
                    continue;
                }
                let due = match last_exchange_kf.get(&pair) {
                    None => true,
                    Some(&last) => {
                        !was_in_range
                            || (config.rendezvous_interval > 0
                                && kf - last >= config.rendezvous_interval)
                    }
                };
                if !due {
                    continue;
                }
                last_exchange_kf.insert(pair, kf);

                // Two disjoint mutable entries out of each map.
                let mut frontend_a = frontends.remove(&a).expect("frontend present");
                let mut frontend_b = frontends.remove(&b).expect("frontend present");
                let mut graph_a = graphs.remove(&a).expect("graph present");
                let mut graph_b = graphs.remove(&b).expect("graph present");
                let session = run_rendezvous(
                    &mut frontend_a,
                    &mut frontend_b,
                    &mut graph_a,
                    &mut graph_b,
                    &world,
                    &frontend_config,
                    &mut bus,
                    std::slice::from_ref(&positions),
                    &mut rng,
                );
                frontends.insert(a, frontend_a);
                frontends.insert(b, frontend_b);
                graphs.insert(a, graph_a);
                graphs.insert(b, graph_b);
                candidates_by_pair.entry(pair).or_default().extend(session?);
            }
        }
    }

    // Consistency filtering per robot pair, in pair order. Candidate order
    // within a pair is the order the sessions produced them.
    let pcm_config = config.pcm.to_core();
    let mut candidate_rows = Vec::new();
    let mut outlier_labels = Vec::new();
    let mut accepted_global = Vec::new();
    let mut accepted_closures = Vec::new();
    for ((a, b), candidates) in &candidates_by_pair {
        let edges: Vec<MeasurementEdge> = candidates.iter().map(|c| c.edge.clone()).collect();
        let (accepted_in_pair, mean_distances): (Vec<usize>, Option<Vec<f64>>) =
            if config.pcm.enabled {
                let outcome = select_inliers(&graphs[a], &graphs[b], &edges, &pcm_config)?;
                (outcome.inlier_indices, Some(outcome.mean_distances))
            } else {
                ((0..edges.len()).collect(), None)
            };
        let base = outlier_labels.len();
        for (index, candidate) in candidates.iter().enumerate() {
            let accepted = accepted_in_pair.contains(&index);
            if accepted {
                accepted_global.push(base + index);
                accepted_closures.push(candidate.edge.clone());
            }
            outlier_labels.push(candidate.outlier);
            candidate_rows.push(CandidateRow {
                robot_a: *a,
                robot_b: *b,
                index_in_pair: index,
                from: candidate.edge.from,
                to: candidate.edge.to,
                outlier_truth: candidate.outlier,
                accepted,
                mean_distance_sq: mean_distances.as_ref().map(|m| m[index]),
            });
        }
    }
    let stats = rejection_stats(&outlier_labels, &accepted_global);

    // The final solve runs at a gather point where every robot is in range;
    // bandwidth accounting does not depend on the positions.
    let gather_positions: BTreeMap<u8, Vector3<f64>> = robot_ids
        .iter()
        .map(|&r| (r, Vector3::zeros()))
        .collect();
    let pgo_config = config.pgo.to_core();
    let outcome = run_distributed_pgo(
        &graphs,
        &accepted_closures,
        &pgo_config,
        &network,
        &gather_positions,
    )?;
    let converged = outcome
        .components
        .iter()
        .all(|c| c.rotation.converged && c.pose.converged);

    let truth = ground_truth_map(&world);
    let ate_m = ate(&outcome.estimates, &truth)?;
    let odometry_only_ate_m = ate(&odometry_only_estimates(&world), &truth)?;

    let mut byte_rows: Vec<ByteRow> = bus
        .log()
        .iter()
        .map(|record| ByteRow {
            source: "frontend",
            record: record.clone(),
        })
        .collect();
    byte_rows.extend(outcome.log.iter().map(|record| ByteRow {
        source: "backend",
        record: record.clone(),
    }));

    let accepted_total = accepted_closures.len() as u64;
    let report = RunReport {
        run_index,
        seed,
        ate_m,
        candidates_total: outlier_labels.len() as u64,
        accepted_total,
        stats,
        bytes_frontend: bus.delivered_bytes(),
        bytes_pgo: outcome.separator_bytes,
        converged,
        pcm_enabled: config.pcm.enabled,
        pcm_threshold: config.pcm.likelihood_threshold,
        descriptor_match_threshold: config.frontend.descriptor_match_threshold,
        min_correspondences: config.frontend.min_correspondences,
        outlier_fraction: config.frontend.outlier_fraction,
    };

    Ok(RunArtifacts {
        report,
        estimates: outcome.estimates,
        accepted_closures,
        candidate_rows,
        byte_rows,
        world,
        odometry_only_ate_m,
    })
}
