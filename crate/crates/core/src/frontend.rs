//! Simulated place-recognition front-end.
//!
//! At a rendezvous the lower-id robot sends the place descriptors its peer
//! has not seen yet, the peer matches them against its own store by
//! Euclidean distance, and matched pairs go through a simulated geometric
//! verification that emits inter-robot loop-closure measurements with
//! controlled inlier/outlier statistics. All traffic flows through the
//! network bus and is priced by the per-message byte model.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, GlobalKey, MeasurementEdge, PoseGraph};
use crate::network::{Bus, CostClass};
use crate::se3::{compose, exp_map, relative, rotation_exp, Pose3, Twist6};
use crate::world::{clamped_information, splitmix64, World};

/// Length of every place descriptor vector.
pub const DESCRIPTOR_DIM: usize = 128;

/// Compact place signature attached to one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceDescriptor {
    pub key: GlobalKey,
    pub vector: Vec<f64>,
}

impl PlaceDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.vector.len() != DESCRIPTOR_DIM {
            return Err(Error::DimensionMismatch {
                expected: DESCRIPTOR_DIM,
                got: self.vector.len(),
            });
        }
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig {
                message: format!("descriptor {} has a non-finite entry", self.key),
            });
        }
        Ok(())
    }
}

/// How descriptors are synthesized from ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontendMode {
    /// Descriptors embed the true planar position directly, so the match
    /// threshold acts in meters and a match is exactly a true place pair.
    DirectInjection,
    /// Descriptors are seeded unit vectors per place cell plus Gaussian
    /// noise; optional cell wrapping makes distant cells share a signature
    /// to induce perceptual aliasing.
    DescriptorSim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub mode: FrontendMode,
    /// Maximum Euclidean distance between descriptor vectors for a match.
    pub descriptor_match_threshold: f64,
    /// Edges whose simulated correspondence count falls below this are
    /// suppressed.
    pub min_correspondences: u32,
    /// Per-axis rotation noise of inlier measurements, radians.
    pub sigma_rot: f64,
    /// Per-axis translation noise of inlier measurements, meters.
    pub sigma_trans: f64,
    /// Probability that verification of a true place pair still produces an
    /// outlier measurement.
    pub outlier_fraction: f64,
    /// Uniform per-axis bounds of outlier rotation vectors, radians.
    pub outlier_rot_range: (f64, f64),
    /// Uniform per-axis bounds of outlier translations, meters.
    pub outlier_trans_range: (f64, f64),
    /// Mean simulated correspondence count for true place pairs.
    pub mean_true_correspondences: f64,
    /// Mean simulated correspondence count for aliased pairs.
    pub mean_aliased_correspondences: f64,
    /// DescriptorSim: side length of one square place cell, meters.
    pub place_cell_size: f64,
    /// DescriptorSim: per-entry Gaussian noise added to the cell signature.
    pub descriptor_noise_sigma: f64,
    /// DescriptorSim: wrap cell indices modulo these counts (x, y); zero
    /// disables wrapping on that axis.
    pub alias_wrap_cells: (u64, u64),
    /// DescriptorSim: salt mixed into every cell and key seed.
    pub descriptor_salt: u64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            mode: FrontendMode::DirectInjection,
            descriptor_match_threshold: 0.12,
            min_correspondences: 0,
            sigma_rot: 0.01,
            sigma_trans: 0.1,
            outlier_fraction: 0.0,
            outlier_rot_range: (-std::f64::consts::PI, std::f64::consts::PI),
            outlier_trans_range: (-10.0, 10.0),
            mean_true_correspondences: 12.0,
            mean_aliased_correspondences: 3.0,
            place_cell_size: 5.0,
            descriptor_noise_sigma: 0.02,
            alias_wrap_cells: (0, 0),
            descriptor_salt: 0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let complain = |message: String| -> Result<()> {
            Err(Error::InvalidConfig { message })
        };
        if !(self.descriptor_match_threshold > 0.0 && self.descriptor_match_threshold.is_finite())
        {
            return complain(format!(
                "descriptor_match_threshold must be positive, got {}",
                self.descriptor_match_threshold
            ));
        }
        for (name, sigma) in [
            ("sigma_rot", self.sigma_rot),
            ("sigma_trans", self.sigma_trans),
            ("descriptor_noise_sigma", self.descriptor_noise_sigma),
        ] {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return complain(format!("{name} must be non-negative, got {sigma}"));
            }
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction < 1.0) {
            return complain(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            ));
        }
        for (name, (lo, hi)) in [
            ("outlier_rot_range", self.outlier_rot_range),
            ("outlier_trans_range", self.outlier_trans_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return complain(format!("{name} must be a finite ordered pair, got ({lo}, {hi})"));
            }
        }
        for (name, mean) in [
            ("mean_true_correspondences", self.mean_true_correspondences),
            ("mean_aliased_correspondences", self.mean_aliased_correspondences),
        ] {
            if !(mean > 0.0 && mean.is_finite()) {
                return complain(format!("{name} must be positive, got {mean}"));
            }
        }
        if !(self.place_cell_size > 0.0 && self.place_cell_size.is_finite()) {
            return complain(format!(
                "place_cell_size must be positive, got {}",
                self.place_cell_size
            ));
        }
        Ok(())
    }
}

/// Protocol progress with one peer. Phases advance only on acknowledged
/// delivery, so an aborted session leaves the state at the last completed
/// phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SessionPhase {
    #[default]
    Idle,
    DescriptorsSent,
    MatchesReturned,
    Verified,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeerState {
    /// Highest keyframe index this robot has successfully delivered to the
    /// peer; None before the first encounter. Never decreases.
    pub last_exchanged: Option<u64>,
    pub phase: SessionPhase,
}

/// One robot's descriptor store and per-peer protocol state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RobotFrontend {
    pub robot_id: u8,
    pub store: BTreeMap<u64, PlaceDescriptor>,
    pub peers: BTreeMap<u8, PeerState>,
}

impl RobotFrontend {
    pub fn new(robot_id: u8) -> Self {
        Self {
            robot_id,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, descriptor: PlaceDescriptor) -> Result<()> {
        descriptor.validate()?;
        if descriptor.key.robot_id != self.robot_id {
            return Err(Error::KeyMismatch {
                message: format!(
                    "descriptor {} stored on robot {}",
                    descriptor.key, self.robot_id
                ),
            });
        }
        self.store.insert(descriptor.key.keyframe_index, descriptor);
        Ok(())
    }

    /// Descriptors not yet delivered to `peer`: everything newer than
    /// `last_exchanged`, or the whole store before the first encounter.
    pub fn delta(&self, peer: u8) -> Vec<PlaceDescriptor> {
        let newer_than = self.peers.get(&peer).and_then(|p| p.last_exchanged);
        self.store
            .iter()
            .filter(|(kf, _)| newer_than.map_or(true, |last| **kf > last))
            .map(|(_, d)| d.clone())
            .collect()
    }
}

fn cell_of(x: f64, y: f64, size: f64) -> (i64, i64) {
    ((x / size).floor() as i64, (y / size).floor() as i64)
}

fn wrapped_cell(cell: (i64, i64), wrap: (u64, u64)) -> (i64, i64) {
    let wrap_axis = |v: i64, w: u64| if w == 0 { v } else { v.rem_euclid(w as i64) };
    (wrap_axis(cell.0, wrap.0), wrap_axis(cell.1, wrap.1))
}

fn seeded_normals(seed: u64, count: usize, sigma: f64) -> Vec<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count).map(|_| normal.sample(&mut rng) * sigma).collect()
}

fn sim_vector(cfg: &FrontendConfig, key: GlobalKey, x: f64, y: f64) -> Vec<f64> {
    let cell = wrapped_cell(cell_of(x, y, cfg.place_cell_size), cfg.alias_wrap_cells);
    let cell_seed = splitmix64(
        splitmix64(cfg.descriptor_salt ^ (cell.0 as u64)).wrapping_add(cell.1 as u64),
    );
    let mut base = seeded_normals(cell_seed, DESCRIPTOR_DIM, 1.0);
    let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut base {
        *v /= norm;
    }
    if cfg.descriptor_noise_sigma > 0.0 {
        let key_seed = splitmix64(cfg.descriptor_salt ^ key.encode() ^ 0x9e37_79b9_7f4a_7c15);
        let noise = seeded_normals(key_seed, DESCRIPTOR_DIM, cfg.descriptor_noise_sigma);
        for (v, n) in base.iter_mut().zip(noise) {
            *v += n;
        }
    }
    base
}

/// Descriptor for one keyframe, synthesized from its ground-truth pose.
pub fn place_descriptor(
    world: &World,
    key: GlobalKey,
    cfg: &FrontendConfig,
) -> Result<PlaceDescriptor> {
    let pose = world.ground_truth_pose(key).ok_or_else(|| Error::KeyMismatch {
        message: format!("no ground truth for {key}"),
    })?;
    let (x, y) = (pose.translation.x, pose.translation.y);
    let vector = match cfg.mode {
        FrontendMode::DirectInjection => {
            let mut v = vec![0.0; DESCRIPTOR_DIM];
            v[0] = x;
            v[1] = y;
            v
        }
        FrontendMode::DescriptorSim => sim_vector(cfg, key, x, y),
    };
    Ok(PlaceDescriptor { key, vector })
}

/// Full stores for every robot and keyframe of the world.
pub fn build_frontends(
    world: &World,
    cfg: &FrontendConfig,
) -> Result<BTreeMap<u8, RobotFrontend>> {
    let mut frontends = BTreeMap::new();
    for robot in &world.robots {
        let mut frontend = RobotFrontend::new(robot.robot_id);
        for kf in 0..robot.ground_truth.len() as u64 {
            let key = GlobalKey::new(robot.robot_id, kf)?;
            frontend.insert(place_descriptor(world, key, cfg)?)?;
        }
        frontends.insert(robot.robot_id, frontend);
    }
    Ok(frontends)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// All pairs (received key, local key) whose vectors lie within `threshold`
/// of each other, ordered by received order then local keyframe.
pub fn match_descriptors(
    received: &[PlaceDescriptor],
    store: &BTreeMap<u64, PlaceDescriptor>,
    threshold: f64,
) -> Result<Vec<(GlobalKey, GlobalKey)>> {
    for descriptor in received.iter().chain(store.values()) {
        descriptor.validate()?;
    }
    let mut pairs = Vec::new();
    for incoming in received {
        for local in store.values() {
            if euclidean(&incoming.vector, &local.vector) <= threshold {
                pairs.push((incoming.key, local.key));
            }
        }
    }
    Ok(pairs)
}

/// Whether the two keys genuinely observe the same place, judged from
/// ground truth: planar distance within the match threshold under
/// DirectInjection, same unwrapped place cell under DescriptorSim.
fn is_true_place(pair: (GlobalKey, GlobalKey), world: &World, cfg: &FrontendConfig) -> Result<bool> {
    let lookup = |key: GlobalKey| -> Result<&Pose3> {
        world.ground_truth_pose(key).ok_or_else(|| Error::KeyMismatch {
            message: format!("no ground truth for {key}"),
        })
    };
    let a = lookup(pair.0)?.translation;
    let b = lookup(pair.1)?.translation;
    Ok(match cfg.mode {
        FrontendMode::DirectInjection => {
            let dx = a.x - b.x;
            let dy = a.y - b.y;
            (dx * dx + dy * dy).sqrt() <= cfg.descriptor_match_threshold
        }
        FrontendMode::DescriptorSim => {
            cell_of(a.x, a.y, cfg.place_cell_size) == cell_of(b.x, b.y, cfg.place_cell_size)
        }
    })
}

/// Simulated geometric verification of one matched pair.
///
/// Draw order per pair is fixed for reproducibility: correspondence count,
/// then the outlier coin, then the measurement perturbation (skipped
/// entirely for inliers when both sigmas are zero). True place pairs draw
/// their count around `mean_true_correspondences` and pass verification
/// with probability `1 - outlier_fraction`; aliased pairs draw around
/// `mean_aliased_correspondences` and always emit outliers. Either way the
/// edge claims the inlier information matrix, and a count below
/// `min_correspondences` suppresses the edge after the draws.
pub fn simulated_verification(
    pair: (GlobalKey, GlobalKey),
    world: &World,
    cfg: &FrontendConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Option<ClosureCandidate>> {
    cfg.validate()?;
    let true_place = is_true_place(pair, world, cfg)?;
    let mean = if true_place {
        cfg.mean_true_correspondences
    } else {
        cfg.mean_aliased_correspondences
    };
    let count = Poisson::new(mean)
        .expect("validated mean")
        .sample(rng)
        .round() as u64;
    let inlier = {
        let coin: f64 = rng.gen();
        true_place && coin >= cfg.outlier_fraction
    };
    let gt_a = world.ground_truth_pose(pair.0).expect("checked above");
    let gt_b = world.ground_truth_pose(pair.1).expect("checked above");
    let relative_pose = if inlier {
        let exact = relative(gt_a, gt_b);
        if cfg.sigma_rot == 0.0 && cfg.sigma_trans == 0.0 {
            exact
        } else {
            let mut draw = |sigma: f64| {
                if sigma == 0.0 {
                    Vector3::zeros()
                } else {
                    let normal = Normal::new(0.0, sigma).expect("validated sigma");
                    Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
                }
            };
            let rot = draw(cfg.sigma_rot);
            let trans = draw(cfg.sigma_trans);
            compose(&exact, &exp_map(&Twist6::new(rot, trans)))
        }
    } else {
        let mut axis = |range: (f64, f64)| {
            Vector3::new(
                rng.gen_range(range.0..=range.1),
                rng.gen_range(range.0..=range.1),
                rng.gen_range(range.0..=range.1),
            )
        };
        let rot = axis(cfg.outlier_rot_range);
        let trans = axis(cfg.outlier_trans_range);
        Pose3::new(rotation_exp(&rot), trans)
    };
    if count < cfg.min_correspondences as u64 {
        return Ok(None);
    }
    Ok(Some(ClosureCandidate {
        edge: MeasurementEdge {
            from: pair.0,
            to: pair.1,
            relative_pose,
            information: clamped_information(cfg.sigma_rot, cfg.sigma_trans),
            kind: EdgeKind::InterRobotLoopClosure,
        },
        outlier: !inlier,
    }))
}

/// A verified loop closure plus the truth of which branch generated it.
///
/// The label never crosses the bus; it exists so the harness can score
/// rejection without peeking at the measurement itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureCandidate {
    pub edge: MeasurementEdge,
    pub outlier: bool,
}

/// Message bodies exchanged during a rendezvous session.
#[derive(Debug, Clone, PartialEq)]
pub enum FrontendPayload {
    Descriptors(Vec<PlaceDescriptor>),
    MatchedPairs(Vec<(GlobalKey, GlobalKey)>),
    LoopClosures(Vec<MeasurementEdge>),
    Acknowledged(Vec<GlobalKey>),
}

fn set_phase(a: &mut RobotFrontend, b: &mut RobotFrontend, phase: SessionPhase) {
    a.peers.entry(b.robot_id).or_default().phase = phase;
    b.peers.entry(a.robot_id).or_default().phase = phase;
}

/// One full rendezvous between two robots, driven over the network bus.
///
/// The lower-id robot initiates: it sends its descriptor delta, the peer
/// returns keypoint payloads for matched pairs, verification runs on the
/// peer, and emitted loop closures are returned to the initiator and
/// acknowledged. Per-round positions come from `positions` (the last entry
/// is reused once exhausted), so a session spans five delivery rounds. A
/// dropped message aborts with [`Error::ConnectivityLost`]; state rolls
/// back to the last completed phase and successfully delivered descriptors
/// are never re-sent.
///
/// Emitted edges are appended to both robots' graphs and returned.
pub fn run_rendezvous(
    a: &mut RobotFrontend,
    b: &mut RobotFrontend,
    graph_a: &mut PoseGraph,
    graph_b: &mut PoseGraph,
    world: &World,
    cfg: &FrontendConfig,
    bus: &mut Bus<FrontendPayload>,
    positions: &[BTreeMap<u8, Vector3<f64>>],
    rng: &mut ChaCha12Rng,
) -> Result<Vec<ClosureCandidate>> {
    cfg.validate()?;
    if a.robot_id == b.robot_id {
        return Err(Error::KeyMismatch {
            message: format!("robot {} cannot rendezvous with itself", a.robot_id),
        });
    }
    if positions.is_empty() {
        return Err(Error::InvalidConfig {
            message: "rendezvous needs at least one position snapshot".into(),
        });
    }
    // The lower id initiates regardless of argument order.
    let (alpha, beta, graph_alpha, graph_beta) = if a.robot_id < b.robot_id {
        (a, b, graph_a, graph_b)
    } else {
        (b, a, graph_b, graph_a)
    };
    set_phase(alpha, beta, SessionPhase::Idle);

    let mut step = 0usize;
    let mut exchange = |bus: &mut Bus<FrontendPayload>,
                        sender: u8,
                        receiver: u8,
                        class: CostClass,
                        count: u64,
                        payload: FrontendPayload|
     -> Result<FrontendPayload> {
        bus.send(sender, receiver, class, count, payload);
        let at = &positions[step.min(positions.len() - 1)];
        step += 1;
        let delivered = bus.advance(at)?;
        delivered
            .into_iter()
            .find(|e| e.sender == sender && e.receiver == receiver)
            .map(|e| e.payload)
            .ok_or(Error::ConnectivityLost {
                a: sender,
                b: receiver,
                round: bus.round(),
            })
    };

    // Descriptor delta, initiator to peer.
    let delta = alpha.delta(beta.robot_id);
    let newest = delta.iter().map(|d| d.key.keyframe_index).max();
    let delivered = exchange(
        bus,
        alpha.robot_id,
        beta.robot_id,
        CostClass::Descriptor,
        delta.len() as u64,
        FrontendPayload::Descriptors(delta),
    )?;
    let received = match delivered {
        FrontendPayload::Descriptors(list) => list,
        _ => unreachable!("descriptor round returns descriptors"),
    };
    if let Some(kf) = newest {
        let state = alpha.peers.entry(beta.robot_id).or_default();
        state.last_exchanged = Some(state.last_exchanged.map_or(kf, |prev| prev.max(kf)));
    }
    set_phase(alpha, beta, SessionPhase::DescriptorsSent);

    // The peer matches and answers with keypoint information per match.
    let matches = match_descriptors(&received, &beta.store, cfg.descriptor_match_threshold)?;
    exchange(
        bus,
        beta.robot_id,
        alpha.robot_id,
        CostClass::KeypointInfo,
        matches.len() as u64,
        FrontendPayload::MatchedPairs(matches.clone()),
    )?;
    set_phase(alpha, beta, SessionPhase::MatchesReturned);

    // Initiator returns its keypoint descriptors for the same pairs.
    exchange(
        bus,
        alpha.robot_id,
        beta.robot_id,
        CostClass::KeypointDescriptors,
        matches.len() as u64,
        FrontendPayload::MatchedPairs(matches.clone()),
    )?;

    // Verification on the peer; surviving closures return to the initiator
    // and are acknowledged with the involved pose estimates.
    let mut candidates = Vec::new();
    for pair in &matches {
        if let Some(candidate) = simulated_verification(*pair, world, cfg, rng)? {
            candidates.push(candidate);
        }
    }
    exchange(
        bus,
        beta.robot_id,
        alpha.robot_id,
        CostClass::LoopClosureMeasurement,
        candidates.len() as u64,
        FrontendPayload::LoopClosures(candidates.iter().map(|c| c.edge.clone()).collect()),
    )?;
    exchange(
        bus,
        alpha.robot_id,
        beta.robot_id,
        CostClass::PoseEstimate,
        candidates.len() as u64,
        FrontendPayload::Acknowledged(candidates.iter().map(|c| c.edge.from).collect()),
    )?;
    set_phase(alpha, beta, SessionPhase::Verified);

    for candidate in &candidates {
        graph_alpha.add_loop_closure(candidate.edge.clone())?;
        graph_beta.add_loop_closure(candidate.edge.clone())?;
    }
    Ok(candidates)
}
