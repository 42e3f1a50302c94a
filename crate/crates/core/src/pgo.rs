//! Two-stage distributed pose-graph optimization.
//!
//! Stage one relaxes rotations with a chordal (Frobenius-norm) objective and
//! robot-block Gauss-Seidel sweeps; stage two linearizes the full pose
//! residuals once around the rotation-initialized guess and runs the same
//! sweep schedule on the Gauss-Newton normal equations, finishing with a
//! single retraction. Robots exchange only separator values (keys touched by
//! an inter-robot edge); [`run_distributed_pgo`] meters that traffic through
//! the simulated network and returns a per-message log next to the estimates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::graph::{GlobalKey, MeasurementEdge, PoseGraph};
use crate::network::{Bus, CostClass, NetworkConfig, TransmissionRecord};
use crate::se3::{
    adjoint, compose, exp_map, inv_right_jacobian, inverse, log_map, project_rotation, relative,
    Covariance6, Pose3, Twist6,
};

/// Iteration caps and stopping tolerance for both sweep stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PgoConfig {
    /// Sweep cap for the rotation stage.
    pub rotation_stage_max_iters: u64,
    /// Sweep cap for the pose stage (per linearization).
    pub pose_stage_max_iters: u64,
    /// Sweeps stop once the relative change of the iterate drops below this.
    pub rel_change_tol: f64,
    /// How many times the pose stage relinearizes; each pass spends a full
    /// sweep budget. One pass keeps the stage a single Gauss-Newton step.
    pub pose_stage_relinearizations: u32,
}

impl Default for PgoConfig {
    fn default() -> Self {
        Self {
            rotation_stage_max_iters: 1000,
            pose_stage_max_iters: 1000,
            rel_change_tol: 1e-5,
            pose_stage_relinearizations: 1,
        }
    }
}

impl PgoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rotation_stage_max_iters == 0 || self.pose_stage_max_iters == 0 {
            return Err(Error::InvalidConfig {
                message: "sweep caps must be at least 1".into(),
            });
        }
        if !(self.rel_change_tol > 0.0 && self.rel_change_tol.is_finite()) {
            return Err(Error::InvalidConfig {
                message: format!("rel_change_tol must be positive, got {}", self.rel_change_tol),
            });
        }
        if self.pose_stage_relinearizations == 0 {
            return Err(Error::InvalidConfig {
                message: "pose_stage_relinearizations must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Convergence record for one sweep stage.
///
/// `objective_per_sweep[0]` is the objective at the initial iterate; entry
/// `s` is the value after sweep `s`. Failure to reach the tolerance inside
/// the sweep cap is reported here rather than as an error: the iterate is
/// still returned.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub sweeps: u64,
    pub converged: bool,
    pub final_relative_change: f64,
    pub objective_per_sweep: Vec<f64>,
    pub final_objective: f64,
}

/// Stage reports for one connected component of the robot graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub robots: Vec<u8>,
    pub anchor: GlobalKey,
    pub rotation: StageReport,
    pub pose: StageReport,
}

/// Result of a full metered run: merged estimates, per-component convergence
/// reports, and the separator-exchange traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct PgoOutcome {
    pub estimates: BTreeMap<GlobalKey, Pose3>,
    pub components: Vec<ComponentReport>,
    pub log: Vec<TransmissionRecord>,
    pub separator_bytes: u64,
}

/// Keys each unordered robot pair must exchange: every key here is an
/// endpoint of at least one inter-robot edge between the two robots.
pub fn separator_sets(
    closures: &[MeasurementEdge],
) -> BTreeMap<(u8, u8), BTreeSet<GlobalKey>> {
    let mut sets: BTreeMap<(u8, u8), BTreeSet<GlobalKey>> = BTreeMap::new();
    for edge in closures {
        let (a, b) = (edge.from.robot_id, edge.to.robot_id);
        if a == b {
            continue;
        }
        let pair = (a.min(b), a.max(b));
        let set = sets.entry(pair).or_default();
        set.insert(edge.from);
        set.insert(edge.to);
    }
    sets
}

/// Borrowed view of one measurement, odometric or inter-robot.
struct EdgeRef<'a> {
    from: GlobalKey,
    to: GlobalKey,
    pose: &'a Pose3,
    information: &'a Covariance6,
}

fn collect_edges<'a>(
    graphs: &'a BTreeMap<u8, PoseGraph>,
    robots: &[u8],
    closures: &[&'a MeasurementEdge],
) -> Result<Vec<EdgeRef<'a>>> {
    let mut edges = Vec::new();
    for robot in robots {
        let graph = graphs.get(robot).ok_or_else(|| Error::KeyMismatch {
            message: format!("no pose graph for robot {robot}"),
        })?;
        for edge in graph.odometry.values() {
            edges.push(EdgeRef {
                from: edge.from,
                to: edge.to,
                pose: &edge.relative_pose,
                information: &edge.information,
            });
        }
    }
    for edge in closures {
        edges.push(EdgeRef {
            from: edge.from,
            to: edge.to,
            pose: &edge.relative_pose,
            information: &edge.information,
        });
    }
    Ok(edges)
}

/// Scalar chordal weight: mean diagonal of the rotation information block.
fn rotation_weight(information: &Covariance6) -> f64 {
    (information[(0, 0)] + information[(1, 1)] + information[(2, 2)]) / 3.0
}

fn node_set(graphs: &BTreeMap<u8, PoseGraph>, robots: &[u8]) -> Result<BTreeSet<GlobalKey>> {
    let mut nodes = BTreeSet::new();
    for robot in robots {
        let graph = graphs.get(robot).ok_or_else(|| Error::KeyMismatch {
            message: format!("no pose graph for robot {robot}"),
        })?;
        nodes.extend(graph.poses.keys().copied());
    }
    Ok(nodes)
}

/// Every edge endpoint must carry an initial estimate, and the union graph
/// must be connected; sweeping a disconnected system would silently leave
/// the unreached part at its initial guess.
fn check_connectivity(nodes: &BTreeSet<GlobalKey>, edges: &[EdgeRef<'_>]) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::DisconnectedGraph);
    }
    let mut adjacency: BTreeMap<GlobalKey, Vec<GlobalKey>> = BTreeMap::new();
    for edge in edges {
        for key in [edge.from, edge.to] {
            if !nodes.contains(&key) {
                return Err(Error::KeyMismatch {
                    message: format!("edge endpoint {key} has no initial estimate"),
                });
            }
        }
        adjacency.entry(edge.from).or_default().push(edge.to);
        adjacency.entry(edge.to).or_default().push(edge.from);
    }
    let start = *nodes.iter().next().expect("nonempty");
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(key) = queue.pop_front() {
        for next in adjacency.get(&key).into_iter().flatten() {
            if seen.insert(*next) {
                queue.push_back(*next);
            }
        }
    }
    if seen.len() != nodes.len() {
        return Err(Error::DisconnectedGraph);
    }
    Ok(())
}

/// Gauge anchor: keyframe 0 of the lowest robot id in scope, pinned to the
/// identity pose throughout both stages.
fn anchor_of(robots: &[u8], nodes: &BTreeSet<GlobalKey>) -> Result<GlobalKey> {
    let lowest = *robots.iter().min().ok_or(Error::DisconnectedGraph)?;
    let anchor = GlobalKey::new(lowest, 0)?;
    if !nodes.contains(&anchor) {
        return Err(Error::KeyMismatch {
            message: format!("anchor {anchor} has no initial estimate"),
        });
    }
    Ok(anchor)
}

/// Records separator traffic on the simulated network. Every solve turn
/// becomes one network round; a dropped message aborts the session.
struct Meter<'a> {
    bus: Bus<()>,
    positions: &'a BTreeMap<u8, Vector3<f64>>,
}

impl Meter<'_> {
    fn turn(&mut self, sends: &[(u8, u8, u64)]) -> Result<()> {
        let before = self.bus.log().len();
        for &(sender, receiver, count) in sends {
            if count > 0 {
                self.bus
                    .send(sender, receiver, CostClass::PoseEstimate, count, ());
            }
        }
        self.bus.advance(self.positions)?;
        if let Some(record) = self.bus.log()[before..].iter().find(|r| !r.delivered) {
            return Err(Error::ConnectivityLost {
                a: record.sender,
                b: record.receiver,
                round: record.round_delivered,
            });
        }
        Ok(())
    }
}

/// Per-sender message sizes: `sends_of[a][b]` is the number of separator
/// keys robot `a` owns in its shared set with robot `b`.
fn separator_send_counts(
    closures: &[&MeasurementEdge],
) -> BTreeMap<u8, BTreeMap<u8, u64>> {
    let owned: Vec<MeasurementEdge> = closures.iter().map(|e| (*e).clone()).collect();
    let sets = separator_sets(&owned);
    let mut counts: BTreeMap<u8, BTreeMap<u8, u64>> = BTreeMap::new();
    for ((a, b), keys) in &sets {
        let a_owned = keys.iter().filter(|k| k.robot_id == *a).count() as u64;
        let b_owned = keys.iter().filter(|k| k.robot_id == *b).count() as u64;
        counts.entry(*a).or_default().insert(*b, a_owned);
        counts.entry(*b).or_default().insert(*a, b_owned);
    }
    counts
}

fn broadcast_sends(counts: &BTreeMap<u8, BTreeMap<u8, u64>>) -> Vec<(u8, u8, u64)> {
    let mut sends = Vec::new();
    for (sender, peers) in counts {
        for (receiver, count) in peers {
            sends.push((*sender, *receiver, *count));
        }
    }
    sends
}

fn robot_sends(counts: &BTreeMap<u8, BTreeMap<u8, u64>>, robot: u8) -> Vec<(u8, u8, u64)> {
    counts
        .get(&robot)
        .into_iter()
        .flatten()
        .map(|(receiver, count)| (robot, *receiver, *count))
        .collect()
}

/// Frobenius-norm rotation objective over all edges in scope:
/// `sum_e w_e * ||R_to - R_from * Rbar_e||_F^2`.
pub fn chordal_objective(
    graphs: &BTreeMap<u8, PoseGraph>,
    closures: &[MeasurementEdge],
    rotations: &BTreeMap<GlobalKey, Matrix3<f64>>,
) -> Result<f64> {
    let robots: Vec<u8> = graphs.keys().copied().collect();
    let closure_refs: Vec<&MeasurementEdge> = closures.iter().collect();
    let edges = collect_edges(graphs, &robots, &closure_refs)?;
    edges_chordal_objective(&edges, rotations)
}

fn edges_chordal_objective(
    edges: &[EdgeRef<'_>],
    rotations: &BTreeMap<GlobalKey, Matrix3<f64>>,
) -> Result<f64> {
    let mut total = 0.0;
    for edge in edges {
        let r_from = rotations.get(&edge.from).ok_or_else(|| Error::KeyMismatch {
            message: format!("no rotation for {}", edge.from),
        })?;
        let r_to = rotations.get(&edge.to).ok_or_else(|| Error::KeyMismatch {
            message: format!("no rotation for {}", edge.to),
        })?;
        let misfit = r_to - r_from * edge.pose.rotation;
        total += rotation_weight(edge.information) * misfit.norm_squared();
    }
    Ok(total)
}

/// Full nonlinear objective: `sum_e r_e^T Lambda_e r_e` with
/// `r_e = log(Zbar^-1 X_from^-1 X_to)`.
pub fn pgo_objective(
    graphs: &BTreeMap<u8, PoseGraph>,
    closures: &[MeasurementEdge],
    estimates: &BTreeMap<GlobalKey, Pose3>,
) -> Result<f64> {
    let robots: Vec<u8> = graphs.keys().copied().collect();
    let closure_refs: Vec<&MeasurementEdge> = closures.iter().collect();
    let edges = collect_edges(graphs, &robots, &closure_refs)?;
    let mut total = 0.0;
    for edge in &edges {
        let x_from = estimates.get(&edge.from).ok_or_else(|| Error::KeyMismatch {
            message: format!("no estimate for {}", edge.from),
        })?;
        let x_to = estimates.get(&edge.to).ok_or_else(|| Error::KeyMismatch {
            message: format!("no estimate for {}", edge.to),
        })?;
        let residual = log_map(&compose(&inverse(edge.pose), &relative(x_from, x_to)))?;
        let r = residual.as_vector();
        total += (r.transpose() * edge.information * r)[(0, 0)];
    }
    Ok(total)
}

/// One robot's rotation-stage normal equations. The three row systems of the
/// chordal objective share the same matrix, so the factorization is computed
/// once and reused with a three-column right-hand side.
struct RotationSystem {
    robot: u8,
    keys: Vec<GlobalKey>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    rhs_terms: Vec<RotationRhsTerm>,
}

/// Contribution of a fixed neighbor: `B_row += gain * R_source^T`.
struct RotationRhsTerm {
    row: usize,
    gain: Matrix3<f64>,
    source: GlobalKey,
}

fn build_rotation_system(
    robot: u8,
    edges: &[EdgeRef<'_>],
    nodes: &BTreeSet<GlobalKey>,
    anchor: GlobalKey,
) -> Result<Option<RotationSystem>> {
    let keys: Vec<GlobalKey> = nodes
        .iter()
        .filter(|k| k.robot_id == robot && **k != anchor)
        .copied()
        .collect();
    if keys.is_empty() {
        return Ok(None);
    }
    let index: BTreeMap<GlobalKey, usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let n = keys.len();
    let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
    let mut rhs_terms = Vec::new();
    let add = |h: &mut DMatrix<f64>, r: usize, c: usize, m: Matrix3<f64>| {
        let mut block = h.fixed_view_mut::<3, 3>(3 * r, 3 * c);
        block += m;
    };
    for edge in edges {
        let w = rotation_weight(edge.information);
        let rbar = edge.pose.rotation;
        let from_idx = index.get(&edge.from).copied();
        let to_idx = index.get(&edge.to).copied();
        match (from_idx, to_idx) {
            (Some(i), Some(j)) => {
                add(&mut h, i, i, w * Matrix3::identity());
                add(&mut h, j, j, w * Matrix3::identity());
                add(&mut h, i, j, -w * rbar);
                add(&mut h, j, i, -w * rbar.transpose());
            }
            (Some(i), None) => {
                add(&mut h, i, i, w * Matrix3::identity());
                rhs_terms.push(RotationRhsTerm {
                    row: i,
                    gain: w * rbar,
                    source: edge.to,
                });
            }
            (None, Some(j)) => {
                add(&mut h, j, j, w * Matrix3::identity());
                rhs_terms.push(RotationRhsTerm {
                    row: j,
                    gain: w * rbar.transpose(),
                    source: edge.from,
                });
            }
            (None, None) => {}
        }
    }
    let chol = h.cholesky().ok_or(Error::DisconnectedGraph)?;
    Ok(Some(RotationSystem {
        robot,
        keys,
        chol,
        rhs_terms,
    }))
}

impl RotationSystem {
    /// Exact block solve given the latest neighbor values; returns the
    /// accumulated squared change and squared previous norm of this block.
    fn solve(&self, state: &mut BTreeMap<GlobalKey, Matrix3<f64>>) -> (f64, f64) {
        let n = self.keys.len();
        let mut b = DMatrix::<f64>::zeros(3 * n, 3);
        for term in &self.rhs_terms {
            let source = state[&term.source];
            let mut block = b.fixed_view_mut::<3, 3>(3 * term.row, 0);
            block += term.gain * source.transpose();
        }
        let x = self.chol.solve(&b);
        let mut delta_sq = 0.0;
        let mut prev_sq = 0.0;
        for (i, key) in self.keys.iter().enumerate() {
            let block: Matrix3<f64> = x.fixed_view::<3, 3>(3 * i, 0).into();
            let updated = block.transpose();
            let prev = state[key];
            delta_sq += (updated - prev).norm_squared();
            prev_sq += prev.norm_squared();
            state.insert(*key, updated);
        }
        (delta_sq, prev_sq)
    }
}

fn rotation_stage_impl(
    graphs: &BTreeMap<u8, PoseGraph>,
    robots: &[u8],
    closures: &[&MeasurementEdge],
    config: &PgoConfig,
    mut meter: Option<&mut Meter<'_>>,
) -> Result<(BTreeMap<GlobalKey, Matrix3<f64>>, StageReport)> {
    config.validate()?;
    let nodes = node_set(graphs, robots)?;
    let edges = collect_edges(graphs, robots, closures)?;
    check_connectivity(&nodes, &edges)?;
    let anchor = anchor_of(robots, &nodes)?;

    let mut state: BTreeMap<GlobalKey, Matrix3<f64>> = BTreeMap::new();
    for robot in robots {
        for (key, pose) in &graphs[robot].poses {
            state.insert(*key, pose.rotation);
        }
    }
    state.insert(anchor, Matrix3::identity());

    let mut systems = Vec::new();
    for robot in robots {
        if let Some(system) = build_rotation_system(*robot, &edges, &nodes, anchor)? {
            systems.push(system);
        }
    }

    let counts = separator_send_counts(closures);
    if let Some(m) = meter.as_deref_mut() {
        m.turn(&broadcast_sends(&counts))?;
    }

    let mut report = StageReport {
        sweeps: 0,
        converged: false,
        final_relative_change: f64::INFINITY,
        objective_per_sweep: vec![edges_chordal_objective(&edges, &state)?],
        final_objective: 0.0,
    };
    for _ in 0..config.rotation_stage_max_iters {
        let mut delta_sq = 0.0;
        let mut prev_sq = 0.0;
        for system in &systems {
            let (d, p) = system.solve(&mut state);
            delta_sq += d;
            prev_sq += p;
            if let Some(m) = meter.as_deref_mut() {
                m.turn(&robot_sends(&counts, system.robot))?;
            }
        }
        report.sweeps += 1;
        report
            .objective_per_sweep
            .push(edges_chordal_objective(&edges, &state)?);
        report.final_relative_change = if delta_sq == 0.0 {
            0.0
        } else {
            (delta_sq / prev_sq.max(1e-24)).sqrt()
        };
        if report.final_relative_change <= config.rel_change_tol {
            report.converged = true;
            break;
        }
    }

    for (key, block) in state.iter_mut() {
        *block = if *key == anchor {
            Matrix3::identity()
        } else {
            project_rotation(block)
        };
    }
    report.final_objective = edges_chordal_objective(&edges, &state)?;
    Ok((state, report))
}

/// Chordal rotation relaxation over every robot in `graphs`.
///
/// Returns special-orthogonal rotation estimates (projection happens once,
/// after the final sweep; intermediate sweeps operate on raw blocks) and the
/// sweep report. The anchor rotation is exactly the identity.
pub fn chordal_rotation_stage(
    graphs: &BTreeMap<u8, PoseGraph>,
    closures: &[MeasurementEdge],
    config: &PgoConfig,
) -> Result<(BTreeMap<GlobalKey, Matrix3<f64>>, StageReport)> {
    let robots: Vec<u8> = graphs.keys().copied().collect();
    let closure_refs: Vec<&MeasurementEdge> = closures.iter().collect();
    rotation_stage_impl(graphs, &robots, &closure_refs, config, None)
}

fn initial_poses_impl(
    graphs: &BTreeMap<u8, PoseGraph>,
    robots: &[u8],
    closures: &[&MeasurementEdge],
    rotations: &BTreeMap<GlobalKey, Matrix3<f64>>,
    mut meter: Option<&mut Meter<'_>>,
) -> Result<BTreeMap<GlobalKey, Pose3>> {
    let nodes = node_set(graphs, robots)?;
    let edges = collect_edges(graphs, robots, closures)?;
    check_connectivity(&nodes, &edges)?;
    let anchor = anchor_of(robots, &nodes)?;

    let mut adjacency: BTreeMap<GlobalKey, Vec<(GlobalKey, usize, bool)>> = BTreeMap::new();
    for (idx, edge) in edges.iter().enumerate() {
        adjacency.entry(edge.from).or_default().push((edge.to, idx, true));
        adjacency.entry(edge.to).or_default().push((edge.from, idx, false));
    }
    for list in adjacency.values_mut() {
        list.sort_by_key(|(key, idx, _)| (*key, *idx));
    }

    let rotation_of = |key: GlobalKey| -> Result<Matrix3<f64>> {
        rotations.get(&key).copied().ok_or_else(|| Error::KeyMismatch {
            message: format!("no rotation for {key}"),
        })
    };

    let mut translations: BTreeMap<GlobalKey, Vector3<f64>> =
        BTreeMap::from([(anchor, Vector3::zeros())]);
    let mut queue = VecDeque::from([anchor]);
    while let Some(parent) = queue.pop_front() {
        let parent_t = translations[&parent];
        for (child, edge_idx, forward) in adjacency.get(&parent).into_iter().flatten() {
            if translations.contains_key(child) {
                continue;
            }
            let edge = &edges[*edge_idx];
            let tbar = edge.pose.translation;
            // Forward tree edge: X_child = X_parent * Zbar, so
            // t_child = t_parent + R_parent * tbar. Reverse:
            // X_child = X_parent * Zbar^-1, so t_child = t_parent - R_parent * Rbar^T * tbar.
            let t = if *forward {
                parent_t + rotation_of(parent)? * tbar
            } else {
                parent_t - rotation_of(parent)? * (edge.pose.rotation.transpose() * tbar)
            };
            translations.insert(*child, t);
            queue.push_back(*child);
            if parent.robot_id != child.robot_id {
                if let Some(m) = meter.as_deref_mut() {
                    m.turn(&[(parent.robot_id, child.robot_id, 1)])?;
                }
            }
        }
    }

    let mut poses = BTreeMap::new();
    for key in &nodes {
        poses.insert(*key, Pose3::new(rotation_of(*key)?, translations[key]));
    }
    Ok(poses)
}

/// Translation initialization for the pose stage: breadth-first spanning
/// tree from the anchor, propagating measured translations through the
/// rotation-stage estimates. Rotations pass through unchanged.
pub fn initial_poses_from_rotations(
    graphs: &BTreeMap<u8, PoseGraph>,
    closures: &[MeasurementEdge],
    rotations: &BTreeMap<GlobalKey, Matrix3<f64>>,
) -> Result<BTreeMap<GlobalKey, Pose3>> {
    let robots: Vec<u8> = graphs.keys().copied().collect();
    let closure_refs: Vec<&MeasurementEdge> = closures.iter().collect();
    initial_poses_impl(graphs, &robots, &closure_refs, rotations, None)
}

/// One edge of the Gauss-Newton system, linearized with right perturbations
/// `X exp(delta)`: `r(delta) ~= r0 + J_from delta_from + J_to delta_to`.
struct LinearizedEdge {
    from: GlobalKey,
    to: GlobalKey,
    jac_from: Matrix6<f64>,
    jac_to: Matrix6<f64>,
    information: Covariance6,
    residual: Vector6<f64>,
}

fn linearize_edge(edge: &EdgeRef<'_>, x0: &BTreeMap<GlobalKey, Pose3>) -> Result<LinearizedEdge> {
    let x_from = &x0[&edge.from];
    let x_to = &x0[&edge.to];
    let residual = log_map(&compose(&inverse(edge.pose), &relative(x_from, x_to)))?;
    let jac_to = inv_right_jacobian(&residual);
    let jac_from = -jac_to * adjoint(&relative(x_to, x_from));
    Ok(LinearizedEdge {
        from: edge.from,
        to: edge.to,
        jac_from,
        jac_to,
        information: *edge.information,
        residual: residual.as_vector(),
    })
}

fn quadratic_objective(
    linearized: &[LinearizedEdge],
    deltas: &BTreeMap<GlobalKey, Vector6<f64>>,
) -> f64 {
    let mut total = 0.0;
    for le in linearized {
        let rho = le.residual + le.jac_from * deltas[&le.from] + le.jac_to * deltas[&le.to];
        total += (rho.transpose() * le.information * rho)[(0, 0)];
    }
    total
}

/// One robot's pose-stage normal equations, factored once per linearization.
struct PoseSystem {
    robot: u8,
    keys: Vec<GlobalKey>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    b0: DVector<f64>,
    cross_terms: Vec<PoseCrossTerm>,
}

/// Coupling to another robot's delta: `b_row -= gain * delta_source`.
struct PoseCrossTerm {
    row: usize,
    gain: Matrix6<f64>,
    source: GlobalKey,
}

fn build_pose_system(
    robot: u8,
    linearized: &[LinearizedEdge],
    nodes: &BTreeSet<GlobalKey>,
    anchor: GlobalKey,
) -> Result<Option<PoseSystem>> {
    let keys: Vec<GlobalKey> = nodes
        .iter()
        .filter(|k| k.robot_id == robot && **k != anchor)
        .copied()
        .collect();
    if keys.is_empty() {
        return Ok(None);
    }
    let index: BTreeMap<GlobalKey, usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let n = keys.len();
    let mut h = DMatrix::<f64>::zeros(6 * n, 6 * n);
    let mut b0 = DVector::<f64>::zeros(6 * n);
    let mut cross_terms = Vec::new();
    for le in linearized {
        let endpoints = [(le.from, &le.jac_from, le.to, &le.jac_to),
            (le.to, &le.jac_to, le.from, &le.jac_from)];
        for (own, jac_own, other, jac_other) in endpoints {
            let Some(&row) = index.get(&own) else {
                continue;
            };
            let weighted = jac_own.transpose() * le.information;
            {
                let mut block = h.fixed_view_mut::<6, 6>(6 * row, 6 * row);
                block += weighted * *jac_own;
            }
            {
                let mut rows = b0.fixed_rows_mut::<6>(6 * row);
                rows -= weighted * le.residual;
            }
            if other == anchor {
                continue;
            }
            if let Some(&col) = index.get(&other) {
                let mut block = h.fixed_view_mut::<6, 6>(6 * row, 6 * col);
                block += weighted * *jac_other;
            } else {
                cross_terms.push(PoseCrossTerm {
                    row,
                    gain: weighted * *jac_other,
                    source: other,
                });
            }
        }
    }
    let chol = h.cholesky().ok_or(Error::DisconnectedGraph)?;
    Ok(Some(PoseSystem {
        robot,
        keys,
        chol,
        b0,
        cross_terms,
    }))
}

impl PoseSystem {
    fn solve(&self, state: &mut BTreeMap<GlobalKey, Vector6<f64>>) -> (f64, f64) {
        let mut b = self.b0.clone();
        for term in &self.cross_terms {
            let mut rows = b.fixed_rows_mut::<6>(6 * term.row);
            rows -= term.gain * state[&term.source];
        }
        let x = self.chol.solve(&b);
        let mut delta_sq = 0.0;
        let mut prev_sq = 0.0;
        for (i, key) in self.keys.iter().enumerate() {
            let updated: Vector6<f64> = x.fixed_rows::<6>(6 * i).into();
            let prev = state[key];
            delta_sq += (updated - prev).norm_squared();
            prev_sq += prev.norm_squared();
            state.insert(*key, updated);
        }
        (delta_sq, prev_sq)
    }
}

fn pose_stage_impl(
    graphs: &BTreeMap<u8, PoseGraph>,
    robots: &[u8],
    closures: &[&MeasurementEdge],
    rotations: &BTreeMap<GlobalKey, Matrix3<f64>>,
    config: &PgoConfig,
    mut meter: Option<&mut Meter<'_>>,
) -> Result<(BTreeMap<GlobalKey, Pose3>, StageReport)> {
    config.validate()?;
    let nodes = node_set(graphs, robots)?;
    let edges = collect_edges(graphs, robots, closures)?;
    check_connectivity(&nodes, &edges)?;
    let anchor = anchor_of(robots, &nodes)?;
    let counts = separator_send_counts(closures);

    let mut x0 = initial_poses_impl(graphs, robots, closures, rotations, meter.as_deref_mut())?;
    let mut report = StageReport {
        sweeps: 0,
        converged: false,
        final_relative_change: f64::INFINITY,
        objective_per_sweep: Vec::new(),
        final_objective: 0.0,
    };

    for _ in 0..config.pose_stage_relinearizations {
        // Robots sharing an inter-robot edge exchange the linearization
        // poses of their separator keys before the sweeps start.
        if let Some(m) = meter.as_deref_mut() {
            m.turn(&broadcast_sends(&counts))?;
        }
        let linearized: Vec<LinearizedEdge> = edges
            .iter()
            .map(|e| linearize_edge(e, &x0))
            .collect::<Result<_>>()?;
        let mut systems = Vec::new();
        for robot in robots {
            if let Some(system) = build_pose_system(*robot, &linearized, &nodes, anchor)? {
                systems.push(system);
            }
        }
        let mut deltas: BTreeMap<GlobalKey, Vector6<f64>> =
            nodes.iter().map(|k| (*k, Vector6::zeros())).collect();

        report.sweeps = 0;
        report.converged = false;
        report.objective_per_sweep = vec![quadratic_objective(&linearized, &deltas)];
        for _ in 0..config.pose_stage_max_iters {
            let mut delta_sq = 0.0;
            let mut prev_sq = 0.0;
            for system in &systems {
                let (d, p) = system.solve(&mut deltas);
                delta_sq += d;
                prev_sq += p;
                if let Some(m) = meter.as_deref_mut() {
                    m.turn(&robot_sends(&counts, system.robot))?;
                }
            }
            report.sweeps += 1;
            report
                .objective_per_sweep
                .push(quadratic_objective(&linearized, &deltas));
            report.final_relative_change = if delta_sq == 0.0 {
                0.0
            } else {
                (delta_sq / prev_sq.max(1e-24)).sqrt()
            };
            if report.final_relative_change <= config.rel_change_tol {
                report.converged = true;
                break;
            }
        }

        let mut retracted = BTreeMap::new();
        for (key, pose) in &x0 {
            let updated = if *key == anchor {
                Pose3::identity()
            } else {
                compose(pose, &exp_map(&Twist6::from_vector(&deltas[key])))
            };
            retracted.insert(*key, updated);
        }
        x0 = retracted;
    }

    let owned: Vec<MeasurementEdge> = closures.iter().map(|e| (*e).clone()).collect();
    let scoped: BTreeMap<u8, PoseGraph> = robots
        .iter()
        .map(|r| (*r, graphs[r].clone()))
        .collect();
    report.final_objective = pgo_objective(&scoped, &owned, &x0)?;
    Ok((x0, report))
}

/// Pose refinement around rotation-stage estimates: a single Gauss-Newton
/// linearization solved to tolerance by robot-block sweeps, then one
/// retraction. The anchor pose is exactly the identity.
pub fn pose_stage(
    graphs: &BTreeMap<u8, PoseGraph>,
    closures: &[MeasurementEdge],
    rotations: &BTreeMap<GlobalKey, Matrix3<f64>>,
    config: &PgoConfig,
) -> Result<(BTreeMap<GlobalKey, Pose3>, StageReport)> {
    let robots: Vec<u8> = graphs.keys().copied().collect();
    let closure_refs: Vec<&MeasurementEdge> = closures.iter().collect();
    pose_stage_impl(graphs, &robots, &closure_refs, rotations, config, None)
}

/// Robots connected by at least one inter-robot edge, grouped for separate
/// anchored solves.
fn robot_components(robots: &[u8], closures: &[MeasurementEdge]) -> Vec<Vec<u8>> {
    let mut parent: BTreeMap<u8, u8> = robots.iter().map(|r| (*r, *r)).collect();
    fn find(parent: &mut BTreeMap<u8, u8>, r: u8) -> u8 {
        let p = parent[&r];
        if p == r {
            return r;
        }
        let root = find(parent, p);
        parent.insert(r, root);
        root
    }
    for edge in closures {
        let (a, b) = (edge.from.robot_id, edge.to.robot_id);
        if parent.contains_key(&a) && parent.contains_key(&b) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent.insert(ra.max(rb), ra.min(rb));
            }
        }
    }
    let mut groups: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
    for robot in robots {
        let root = find(&mut parent, *robot);
        groups.entry(root).or_default().push(*robot);
    }
    groups.into_values().collect()
}

/// Full two-stage solve with separator traffic metered over the simulated
/// network at the given (frozen) robot positions.
///
/// Robots not linked by any inter-robot edge form separate components, each
/// anchored at its own lowest robot; a single-robot component exchanges no
/// messages. A message dropped for range aborts the session with
/// [`Error::ConnectivityLost`].
pub fn run_distributed_pgo(
    graphs: &BTreeMap<u8, PoseGraph>,
    closures: &[MeasurementEdge],
    config: &PgoConfig,
    network: &NetworkConfig,
    positions: &BTreeMap<u8, Vector3<f64>>,
) -> Result<PgoOutcome> {
    config.validate()?;
    network.validate()?;
    let robots: Vec<u8> = graphs.keys().copied().collect();
    let mut meter = Meter {
        bus: Bus::new(network.comm_range, Default::default()),
        positions,
    };
    let mut estimates = BTreeMap::new();
    let mut components = Vec::new();
    for group in robot_components(&robots, closures) {
        let scoped: Vec<&MeasurementEdge> = closures
            .iter()
            .filter(|e| group.contains(&e.from.robot_id) && group.contains(&e.to.robot_id))
            .collect();
        let (rotations, rotation_report) =
            rotation_stage_impl(graphs, &group, &scoped, config, Some(&mut meter))?;
        let (poses, pose_report) =
            pose_stage_impl(graphs, &group, &scoped, &rotations, config, Some(&mut meter))?;
        let nodes = node_set(graphs, &group)?;
        let anchor = anchor_of(&group, &nodes)?;
        estimates.extend(poses);
        components.push(ComponentReport {
            robots: group,
            anchor,
            rotation: rotation_report,
            pose: pose_report,
        });
    }
    let separator_bytes = meter.bus.delivered_bytes();
    Ok(PgoOutcome {
        estimates,
        components,
        log: meter.bus.log().to_vec(),
        separator_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeKind;
    use crate::se3::rotation_exp;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn key(robot: u8, kf: u64) -> GlobalKey {
        GlobalKey::new(robot, kf).unwrap()
    }

    fn info_diag(rot: f64, trans: f64) -> Covariance6 {
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            m[(i, i)] = rot;
            m[(i + 3, i + 3)] = trans;
        }
        m
    }

    /// Wiggly ground-truth path for one robot: unit steps along x with a
    /// deterministic yaw/pitch profile so rotations are exercised.
    fn truth_path(robot: u8, count: u64) -> Vec<Pose3> {
        let mut poses = vec![Pose3::new(
            Matrix3::identity(),
            Vector3::new(0.0, 3.0 * robot as f64, 0.0),
        )];
        for k in 1..count {
            let t = k as f64 + robot as f64;
            let step = Pose3::new(
                rotation_exp(&Vector3::new(0.0, 0.03 * t.cos(), 0.15 * t.sin())),
                Vector3::new(1.0, 0.0, 0.02 * t.sin()),
            );
            let prev = poses[k as usize - 1];
            poses.push(compose(&prev, &step));
        }
        poses
    }

    fn small_twist(rng: &mut ChaCha12Rng, rot_sigma: f64, trans_sigma: f64) -> Twist6 {
        let mut draw = |s: f64| (rng.gen::<f64>() * 2.0 - 1.0) * s;
        Twist6::new(
            Vector3::new(draw(rot_sigma), draw(rot_sigma), draw(rot_sigma)),
            Vector3::new(draw(trans_sigma), draw(trans_sigma), draw(trans_sigma)),
        )
    }

    /// Two robots with noisy odometry, dead-reckoned initial estimates, and
    /// noisy inter-robot closures at the given keyframes.
    fn two_robot_fixture(
        seed: u64,
        per_robot: u64,
        closure_keyframes: &[u64],
        noise: f64,
    ) -> (BTreeMap<u8, PoseGraph>, Vec<MeasurementEdge>, BTreeMap<GlobalKey, Pose3>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut graphs = BTreeMap::new();
        let mut truths = BTreeMap::new();
        for robot in 0u8..2 {
            let truth = truth_path(robot, per_robot);
            let mut graph = PoseGraph::new(robot);
            let mut dead = truth[0];
            graph.poses.insert(key(robot, 0), dead);
            for k in 1..per_robot {
                let exact = relative(&truth[k as usize - 1], &truth[k as usize]);
                let measured = compose(
                    &exact,
                    &exp_map(&small_twist(&mut rng, 0.01 * noise, 0.05 * noise)),
                );
                graph
                    .add_odometry(MeasurementEdge {
                        from: key(robot, k - 1),
                        to: key(robot, k),
                        relative_pose: measured,
                        information: info_diag(1e4, 4e2),
                        kind: EdgeKind::Odometry,
                    })
                    .unwrap();
                dead = compose(&dead, &measured);
                graph.poses.insert(key(robot, k), dead);
            }
            for (k, pose) in truth.iter().enumerate() {
                truths.insert(key(robot, k as u64), *pose);
            }
            graphs.insert(robot, graph);
        }
        let mut closures = Vec::new();
        for &k in closure_keyframes {
            let exact = relative(&truths[&key(0, k)], &truths[&key(1, k)]);
            let measured = compose(
                &exact,
                &exp_map(&small_twist(&mut rng, 0.01 * noise, 0.05 * noise)),
            );
            closures.push(MeasurementEdge {
                from: key(0, k),
                to: key(1, k),
                relative_pose: measured,
                information: info_diag(1e4, 4e2),
                kind: EdgeKind::InterRobotLoopClosure,
            });
        }
        (graphs, closures, truths)
    }

    fn tight_config() -> PgoConfig {
        PgoConfig {
            rel_change_tol: 1e-12,
            rotation_stage_max_iters: 5000,
            pose_stage_max_iters: 5000,
            ..PgoConfig::default()
        }
    }

    fn pose_gap(a: &Pose3, b: &Pose3) -> f64 {
        let d = relative(a, b);
        d.rotation_angle() + d.translation.norm()
    }

    #[test]
    fn single_robot_reproduces_chained_odometry() {
        let (mut graphs, _, _) = two_robot_fixture(7, 12, &[], 1.0);
        graphs.remove(&1);
        let expected: Vec<Pose3> = {
            let graph = &graphs[&0];
            let mut acc = Pose3::identity();
            let mut out = vec![acc];
            for k in 1..12 {
                acc = compose(&acc, &graph.odometry[&(k - 1)].relative_pose);
                out.push(acc);
            }
            out
        };
        let config = tight_config();
        let (rotations, report) = chordal_rotation_stage(&graphs, &[], &config).unwrap();
        let (poses, _) = pose_stage(&graphs, &[], &rotations, &config).unwrap();
        assert!(report.converged);
        for k in 0..12 {
            assert!(pose_gap(&poses[&key(0, k)], &expected[k as usize]) < 1e-9);
        }
    }

    #[test]
    fn noiseless_graph_recovers_truth_in_anchor_frame() {
        let (graphs, closures, truths) = two_robot_fixture(11, 10, &[2, 5, 9], 0.0);
        let config = tight_config();
        let (rotations, _) = chordal_rotation_stage(&graphs, &closures, &config).unwrap();
        let (poses, report) = pose_stage(&graphs, &closures, &rotations, &config).unwrap();
        assert!(report.final_objective < 1e-10);
        let gauge = inverse(&truths[&key(0, 0)]);
        for (k, pose) in &poses {
            let expected = compose(&gauge, &truths[k]);
            assert!(
                pose_gap(pose, &expected) < 1e-6,
                "{k} off by {}",
                pose_gap(pose, &expected)
            );
        }
    }

    #[test]
    fn chordal_objective_never_increases_across_sweeps() {
        let (graphs, closures, _) = two_robot_fixture(23, 15, &[1, 4, 8, 12], 1.0);
        let (_, report) = chordal_rotation_stage(&graphs, &closures, &tight_config()).unwrap();
        assert!(report.objective_per_sweep.len() >= 2);
        for pair in report.objective_per_sweep.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "objective rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn sweeps_match_centralized_solve_of_the_same_linear_system() {
        let (graphs, closures, _) = two_robot_fixture(31, 9, &[3, 7], 1.0);
        let config = tight_config();
        let (rotations, _) = chordal_rotation_stage(&graphs, &closures, &config).unwrap();
        let (poses, _) = pose_stage(&graphs, &closures, &rotations, &config).unwrap();

        // Same normal equations, assembled over both robots at once and
        // solved by one dense factorization.
        let x0 = initial_poses_from_rotations(&graphs, &closures, &rotations).unwrap();
        let robots: Vec<u8> = graphs.keys().copied().collect();
        let refs: Vec<&MeasurementEdge> = closures.iter().collect();
        let edges = collect_edges(&graphs, &robots, &refs).unwrap();
        let nodes = node_set(&graphs, &robots).unwrap();
        let anchor = key(0, 0);
        let unknowns: Vec<GlobalKey> =
            nodes.iter().filter(|k| **k != anchor).copied().collect();
        let index: BTreeMap<GlobalKey, usize> =
            unknowns.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let n = unknowns.len();
        let mut h = DMatrix::<f64>::zeros(6 * n, 6 * n);
        let mut g = DVector::<f64>::zeros(6 * n);
        for edge in &edges {
            let le = linearize_edge(edge, &x0).unwrap();
            let ends = [(le.from, le.jac_from, le.to, le.jac_to),
                (le.to, le.jac_to, le.from, le.jac_from)];
            for (own, jac, other, jac_other) in ends {
                let Some(&row) = index.get(&own) else { continue };
                let weighted = jac.transpose() * le.information;
                let mut diag = h.fixed_view_mut::<6, 6>(6 * row, 6 * row);
                diag += weighted * jac;
                let mut rows = g.fixed_rows_mut::<6>(6 * row);
                rows -= weighted * le.residual;
                if let Some(&col) = index.get(&other) {
                    let mut off = h.fixed_view_mut::<6, 6>(6 * row, 6 * col);
                    off += weighted * jac_other;
                }
            }
        }
        let delta = h.cholesky().unwrap().solve(&g);
        for (i, k) in unknowns.iter().enumerate() {
            let d: Vector6<f64> = delta.fixed_rows::<6>(6 * i).into();
            let oracle = compose(&x0[k], &exp_map(&Twist6::from_vector(&d)));
            assert!(
                pose_gap(&poses[k], &oracle) < 1e-8,
                "{k} differs from centralized solve by {}",
                pose_gap(&poses[k], &oracle)
            );
        }
        assert!(pose_gap(&poses[&anchor], &Pose3::identity()) == 0.0);
    }

    #[test]
    fn anchored_solution_ignores_initial_gauge() {
        let (graphs, closures, _) = two_robot_fixture(43, 10, &[2, 6], 1.0);
        let config = tight_config();
        let (rotations_a, _) = chordal_rotation_stage(&graphs, &closures, &config).unwrap();
        let (poses_a, _) = pose_stage(&graphs, &closures, &rotations_a, &config).unwrap();

        let gauge = Pose3::new(
            rotation_exp(&Vector3::new(0.4, -0.2, 1.1)),
            Vector3::new(25.0, -3.0, 7.0),
        );
        let mut moved = graphs.clone();
        for graph in moved.values_mut() {
            for pose in graph.poses.values_mut() {
                *pose = compose(&gauge, pose);
            }
        }
        let (rotations_b, _) = chordal_rotation_stage(&moved, &closures, &config).unwrap();
        let (poses_b, _) = pose_stage(&moved, &closures, &rotations_b, &config).unwrap();
        for (k, pose) in &poses_a {
            assert!(
                pose_gap(pose, &poses_b[k]) < 1e-6,
                "{k} moved by {}",
                pose_gap(pose, &poses_b[k])
            );
        }
    }

    #[test]
    fn disconnected_direct_stage_call_is_an_error() {
        let (graphs, _, _) = two_robot_fixture(5, 6, &[], 1.0);
        let err = chordal_rotation_stage(&graphs, &[], &PgoConfig::default()).unwrap_err();
        assert_eq!(err, Error::DisconnectedGraph);
    }

    #[test]
    fn metered_run_matches_direct_stages_and_prices_separators() {
        let (graphs, closures, _) = two_robot_fixture(61, 8, &[1, 5], 1.0);
        let config = tight_config();
        let positions: BTreeMap<u8, Vector3<f64>> = [
            (0u8, Vector3::new(0.0, 0.0, 0.0)),
            (1u8, Vector3::new(5.0, 0.0, 0.0)),
        ]
        .into();
        let network = NetworkConfig::default();
        let outcome =
            run_distributed_pgo(&graphs, &closures, &config, &network, &positions).unwrap();

        let (rotations, _) = chordal_rotation_stage(&graphs, &closures, &config).unwrap();
        let (poses, _) = pose_stage(&graphs, &closures, &rotations, &config).unwrap();
        assert_eq!(outcome.estimates, poses);

        // Two closures at distinct keyframes: each robot owns 2 separator
        // keys, so every exchanged message carries 1 or 2 keys. 1 key costs
        // round(0.34 * 1024) = 348 bytes.
        assert!(!outcome.log.is_empty());
        let mut bytes = 0;
        for record in &outcome.log {
            assert!(record.delivered);
            assert!(record.item_count == 1 || record.item_count == 2);
            assert_eq!(record.round_delivered, record.round_sent + 1);
            bytes += record.bytes;
        }
        assert_eq!(outcome.separator_bytes, bytes);
        assert_eq!(
            outcome.log.iter().filter(|r| r.item_count == 2).count() as u64 * 696
                + outcome.log.iter().filter(|r| r.item_count == 1).count() as u64 * 348,
            bytes
        );
        assert_eq!(outcome.components.len(), 1);
        assert!(outcome.components[0].pose.converged);
    }

    #[test]
    fn robots_without_shared_edges_solve_separately_with_no_traffic() {
        let (graphs, _, _) = two_robot_fixture(71, 7, &[], 1.0);
        let positions: BTreeMap<u8, Vector3<f64>> = [
            (0u8, Vector3::new(0.0, 0.0, 0.0)),
            (1u8, Vector3::new(5.0, 0.0, 0.0)),
        ]
        .into();
        let outcome = run_distributed_pgo(
            &graphs,
            &[],
            &tight_config(),
            &NetworkConfig::default(),
            &positions,
        )
        .unwrap();
        assert!(outcome.log.is_empty());
        assert_eq!(outcome.separator_bytes, 0);
        assert_eq!(outcome.components.len(), 2);
        assert_eq!(outcome.components[0].anchor, key(0, 0));
        assert_eq!(outcome.components[1].anchor, key(1, 0));
        assert!(pose_gap(&outcome.estimates[&key(1, 0)], &Pose3::identity()) < 1e-12);
    }

    #[test]
    fn out_of_range_session_aborts_with_connectivity_loss() {
        let (graphs, closures, _) = two_robot_fixture(83, 8, &[1, 5], 1.0);
        let positions: BTreeMap<u8, Vector3<f64>> = [
            (0u8, Vector3::new(0.0, 0.0, 0.0)),
            (1u8, Vector3::new(500.0, 0.0, 0.0)),
        ]
        .into();
        let err = run_distributed_pgo(
            &graphs,
            &closures,
            &PgoConfig::default(),
            &NetworkConfig::default(),
            &positions,
        )
        .unwrap_err();
        match err {
            Error::ConnectivityLost { a, b, .. } => {
                assert!(a != b);
            }
            other => panic!("expected connectivity loss, got {other:?}"),
        }
    }

    #[test]
    fn separator_sets_cover_exactly_the_closure_endpoints() {
        let (_, closures, _) = two_robot_fixture(97, 10, &[2, 4, 9], 1.0);
        let sets = separator_sets(&closures);
        assert_eq!(sets.len(), 1);
        let keys = &sets[&(0, 1)];
        assert_eq!(keys.len(), 6);
        for edge in &closures {
            assert!(keys.contains(&edge.from) && keys.contains(&edge.to));
        }
        for k in keys {
            assert!(closures.iter().any(|e| e.from == *k || e.to == *k));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut config = PgoConfig::default();
        config.rel_change_tol = 0.0;
        assert!(config.validate().is_err());
        config = PgoConfig::default();
        config.rotation_stage_max_iters = 0;
        assert!(config.validate().is_err());
        config = PgoConfig::default();
        config.pose_stage_relinearizations = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn looser_tolerance_flags_nonconvergence_without_failing() {
        let (graphs, closures, _) = two_robot_fixture(13, 12, &[2, 8], 1.0);
        let config = PgoConfig {
            rotation_stage_max_iters: 1,
            pose_stage_max_iters: 1,
            rel_change_tol: 1e-14,
            pose_stage_relinearizations: 1,
        };
        let (rotations, report) = chordal_rotation_stage(&graphs, &closures, &config).unwrap();
        assert!(!report.converged);
        assert_eq!(report.sweeps, 1);
        let (_, pose_report) = pose_stage(&graphs, &closures, &rotations, &config).unwrap();
        assert!(!pose_report.converged);
    }

    #[test]
    fn random_graphs_land_near_a_brute_force_gauss_newton_oracle() {
        // Independent oracle: full Gauss-Newton with repeated
        // relinearization on the complete graph, same anchor.
        for seed in [3u64, 17, 29] {
            let (graphs, closures, _) = two_robot_fixture(seed, 8, &[2, 6], 1.0);
            let config = tight_config();
            let (rotations, _) = chordal_rotation_stage(&graphs, &closures, &config).unwrap();
            let (_poses, report) = pose_stage(&graphs, &closures, &rotations, &config).unwrap();

            let robots: Vec<u8> = graphs.keys().copied().collect();
            let refs: Vec<&MeasurementEdge> = closures.iter().collect();
            let edges = collect_edges(&graphs, &robots, &refs).unwrap();
            let nodes = node_set(&graphs, &robots).unwrap();
            let anchor = key(0, 0);
            let unknowns: Vec<GlobalKey> =
                nodes.iter().filter(|k| **k != anchor).copied().collect();
            let index: BTreeMap<GlobalKey, usize> =
                unknowns.iter().enumerate().map(|(i, k)| (*k, i)).collect();
            let mut x = initial_poses_from_rotations(&graphs, &closures, &rotations).unwrap();
            for _ in 0..25 {
                let n = unknowns.len();
                let mut h = DMatrix::<f64>::zeros(6 * n, 6 * n);
                let mut g = DVector::<f64>::zeros(6 * n);
                for edge in &edges {
                    let le = linearize_edge(edge, &x).unwrap();
                    let ends = [(le.from, le.jac_from, le.to, le.jac_to),
                        (le.to, le.jac_to, le.from, le.jac_from)];
                    for (own, jac, other, jac_other) in ends {
                        let Some(&row) = index.get(&own) else { continue };
                        let weighted = jac.transpose() * le.information;
                        let mut diag = h.fixed_view_mut::<6, 6>(6 * row, 6 * row);
                        diag += weighted * jac;
                        let mut rows = g.fixed_rows_mut::<6>(6 * row);
                        rows -= weighted * le.residual;
                        if let Some(&col) = index.get(&other) {
                            let mut off = h.fixed_view_mut::<6, 6>(6 * row, 6 * col);
                            off += weighted * jac_other;
                        }
                    }
                }
                let delta = h.cholesky().unwrap().solve(&g);
                for (i, k) in unknowns.iter().enumerate() {
                    let d: Vector6<f64> = delta.fixed_rows::<6>(6 * i).into();
                    let moved = compose(&x[k], &exp_map(&Twist6::from_vector(&d)));
                    x.insert(*k, moved);
                }
            }
            let oracle_objective = pgo_objective(&graphs, &closures, &x).unwrap();
            assert!(
                report.final_objective <= oracle_objective * 1.05 + 1e-12,
                "seed {seed}: {} vs oracle {}",
                report.final_objective,
                oracle_objective
            );
        }
    }
}
