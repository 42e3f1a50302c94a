//! Seeded synthetic worlds: ground-truth trajectories for a team of robots
//! plus the noisy odometry each robot would record along them.
//!
//! Trajectories are planar (yaw-only rotations) with each robot flying at
//! its own altitude, so paths cross in the horizontal plane without
//! colliding. Odometry corrupts each ground-truth relative pose with a
//! right-tangent Gaussian draw and reports the matching diagonal
//! information matrix.
//!
//! Reproducibility contract: every robot draws from its own generator,
//! seeded by mixing the world seed with the robot id, so adding robot n+1
//! to a config leaves robots 0..n bit-identical.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::g2o::G2oDocument;
use crate::graph::{EdgeKind, GlobalKey, MeasurementEdge, PoseGraph};
use crate::se3::{compose, exp_map, relative, rotation_exp, Covariance6, Pose3, Twist6};

/// Sigmas at or below this are treated as exactly zero: the noise draw is
/// skipped entirely (keeping generator streams stable) and the information
/// matrix is clamped to 1/(1e-9)^2 instead of dividing by zero.
pub const SIGMA_FLOOR: f64 = 1.0e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trajectory {
    /// Smooth yaw random walk with boundary avoidance.
    RandomWalk,
    /// Shared circular track, robots phase-offset along it.
    Circle,
    /// Serpentine sweep of the arena, rows offset per robot.
    GridLawnmower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_robots: u8,
    pub keyframes_per_robot: u64,
    pub trajectory: Trajectory,
    /// Half-width of the square arena: x and y stay within +/- this bound.
    pub arena_half_extent: f64,
    pub odom_sigma_rot: f64,
    pub odom_sigma_trans: f64,
    pub seed: u64,
    /// Distance traveled between consecutive keyframes.
    pub step_length: f64,
    /// Standard deviation of the per-step yaw increment (RandomWalk only).
    pub yaw_sigma: f64,
    /// Vertical gap between consecutive robots' flight planes.
    pub altitude_spacing: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_robots: 5,
            keyframes_per_robot: 100,
            trajectory: Trajectory::RandomWalk,
            arena_half_extent: 50.0,
            odom_sigma_rot: 0.01,
            odom_sigma_trans: 0.1,
            seed: 0,
            step_length: 1.0,
            yaw_sigma: 0.25,
            altitude_spacing: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let complain = |message: String| -> Result<()> { Err(Error::InvalidConfig { message }) };
        if self.n_robots == 0 {
            return complain("n_robots must be positive".into());
        }
        if self.keyframes_per_robot < 2 {
            return complain("keyframes_per_robot must be at least 2".into());
        }
        for (name, v) in [
            ("arena_half_extent", self.arena_half_extent),
            ("step_length", self.step_length),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return complain(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [
            ("odom_sigma_rot", self.odom_sigma_rot),
            ("odom_sigma_trans", self.odom_sigma_trans),
            ("yaw_sigma", self.yaw_sigma),
            ("altitude_spacing", self.altitude_spacing),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return complain(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if self.step_length > self.arena_half_extent {
            return complain("step_length exceeds the arena half extent".into());
        }
        Ok(())
    }
}

/// One robot's slice of the world.
#[derive(Debug, Clone)]
pub struct RobotWorld {
    pub robot_id: u8,
    /// Ground-truth pose per keyframe index.
    pub ground_truth: Vec<Pose3>,
    /// Noisy odometry chain plus dead-reckoned initial pose estimates,
    /// anchored at the true starting pose.
    pub graph: PoseGraph,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    /// Indexed by robot id.
    pub robots: Vec<RobotWorld>,
}

impl World {
    pub fn ground_truth_pose(&self, key: GlobalKey) -> Option<&Pose3> {
        self.robots
            .get(key.robot_id as usize)
            .and_then(|r| r.ground_truth.get(key.keyframe_index as usize))
    }

    /// Robot positions at a keyframe tick (clamped to each robot's last
    /// keyframe), as needed for connectivity checks.
    pub fn positions_at(&self, keyframe: u64) -> BTreeMap<u8, Vector3<f64>> {
        self.robots
            .iter()
            .map(|r| {
                let idx = (keyframe as usize).min(r.ground_truth.len() - 1);
                (r.robot_id, r.ground_truth[idx].translation)
            })
            .collect()
    }

    /// Ground-truth poses as a vertex-only g2o document.
    pub fn ground_truth_document(&self) -> G2oDocument {
        let mut document = G2oDocument::default();
        for robot in &self.robots {
            for (k, pose) in robot.ground_truth.iter().enumerate() {
                let key = GlobalKey::new(robot.robot_id, k as u64).expect("small index");
                document.poses.insert(key, pose.clone());
            }
        }
        document
    }
}

/// 64-bit finalizer used to derive independent seeds for draw streams.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for one of a robot's independent draw streams.
fn sub_seed(seed: u64, robot: u8, stream: u64) -> u64 {
    splitmix64(splitmix64(seed ^ robot as u64) ^ stream)
}

const TRAJECTORY_STREAM: u64 = 1;
const ODOMETRY_STREAM: u64 = 2;

fn yaw_pose(x: f64, y: f64, z: f64, yaw: f64) -> Pose3 {
    Pose3::new(
        rotation_exp(&Vector3::new(0.0, 0.0, yaw)),
        Vector3::new(x, y, z),
    )
}

fn ground_truth_trajectory(config: &WorldConfig, robot: u8) -> Vec<Pose3> {
    let n = config.keyframes_per_robot;
    let altitude = robot as f64 * config.altitude_spacing;
    let mut rng = ChaCha12Rng::seed_from_u64(sub_seed(config.seed, robot, TRAJECTORY_STREAM));
    let mut poses = Vec::with_capacity(n as usize);
    match config.trajectory {
        Trajectory::RandomWalk => {
            // Start spread over the inner half of the arena, deterministic
            // per robot.
            let inner = config.arena_half_extent * 0.5;
            let mut x = rng.gen_range(-inner..inner);
            let mut y = rng.gen_range(-inner..inner);
            let mut yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let walk = Normal::new(0.0, config.yaw_sigma.max(1.0e-12)).expect("positive sigma");
            for _ in 0..n {
                poses.push(yaw_pose(x, y, altitude, yaw));
                let mut next_yaw = yaw + if config.yaw_sigma > 0.0 { walk.sample(&mut rng) } else { 0.0 };
                let margin = config.arena_half_extent - config.step_length;
                let (nx, ny) = (x + config.step_length * next_yaw.cos(), y + config.step_length * next_yaw.sin());
                if nx.abs() > margin || ny.abs() > margin {
                    // Turn toward the arena center instead of stepping out.
                    next_yaw = (-y).atan2(-x);
                }
                x += config.step_length * next_yaw.cos();
                y += config.step_length * next_yaw.sin();
                yaw = next_yaw;
            }
        }
        Trajectory::Circle => {
            let radius = config.arena_half_extent * 0.7;
            let phase0 = robot as f64 / config.n_robots as f64 * std::f64::consts::TAU;
            let dphi = config.step_length / radius;
            for k in 0..n {
                let phi = phase0 + k as f64 * dphi;
                // Heading is tangent to the circle.
                poses.push(yaw_pose(
                    radius * phi.cos(),
                    radius * phi.sin(),
                    altitude,
                    phi + std::f64::consts::FRAC_PI_2,
                ));
            }
        }
        Trajectory::GridLawnmower => {
            let half = config.arena_half_extent * 0.9;
            let rows = (config.n_robots as f64).max(4.0);
            let row_gap = 2.0 * half / rows;
            // Offset rows per robot so sweeps interleave and overlap.
            let mut x = -half;
            let mut y = -half + robot as f64 * row_gap / config.n_robots as f64;
            let mut heading_right = true;
            for _ in 0..n {
                let yaw = if heading_right { 0.0 } else { std::f64::consts::PI };
                poses.push(yaw_pose(x, y, altitude, yaw));
                let dx = if heading_right { config.step_length } else { -config.step_length };
                if (x + dx).abs() > half {
                    y += row_gap;
                    if y > half {
                        y = -half; // wrap and sweep again
                    }
                    heading_right = !heading_right;
                } else {
                    x += dx;
                }
            }
        }
    }
    poses
}

pub(crate) fn clamped_information(sigma_rot: f64, sigma_trans: f64) -> Covariance6 {
    let mut info = Covariance6::zeros();
    let rot = sigma_rot.max(SIGMA_FLOOR);
    let trans = sigma_trans.max(SIGMA_FLOOR);
    for i in 0..3 {
        info[(i, i)] = 1.0 / (rot * rot);
        info[(i + 3, i + 3)] = 1.0 / (trans * trans);
    }
    info
}

/// Builds the full world: ground truth and per-robot noisy odometry graphs.
pub fn generate(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let information = clamped_information(config.odom_sigma_rot, config.odom_sigma_trans);
    let mut robots = Vec::with_capacity(config.n_robots as usize);
    for robot in 0..config.n_robots {
        let ground_truth = ground_truth_trajectory(config, robot);
        let mut rng = ChaCha12Rng::seed_from_u64(sub_seed(config.seed, robot, ODOMETRY_STREAM));
        let rot_noise = Normal::new(0.0, config.odom_sigma_rot.max(1.0e-12)).expect("sigma");
        let trans_noise = Normal::new(0.0, config.odom_sigma_trans.max(1.0e-12)).expect("sigma");

        let mut graph = PoseGraph::new(robot);
        let start = ground_truth[0].clone();
        graph.poses.insert(GlobalKey::new(robot, 0)?, start.clone());
        let mut estimate = start;
        for k in 0..ground_truth.len() - 1 {
            let truth = relative(&ground_truth[k], &ground_truth[k + 1]);
            // Right-tangent perturbation; zero sigmas skip the draw so the
            // stream position does not depend on them.
            let mut twist = Twist6::zero();
            if config.odom_sigma_rot > 0.0 {
                for i in 0..3 {
                    twist.rot[i] = rot_noise.sample(&mut rng);
                }
            }
            if config.odom_sigma_trans > 0.0 {
                for i in 0..3 {
                    twist.trans[i] = trans_noise.sample(&mut rng);
                }
            }
            let measured = compose(&truth, &exp_map(&twist));
            graph.add_odometry(MeasurementEdge {
                from: GlobalKey::new(robot, k as u64)?,
                to: GlobalKey::new(robot, k as u64 + 1)?,
                relative_pose: measured.clone(),
                information,
                kind: EdgeKind::Odometry,
            })?;
            estimate = compose(&estimate, &measured);
            graph
                .poses
                .insert(GlobalKey::new(robot, k as u64 + 1)?, estimate.clone());
        }
        robots.push(RobotWorld {
            robot_id: robot,
            ground_truth,
            graph,
        });
    }
    Ok(World {
        config: config.clone(),
        robots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::odometric_relative;
    use crate::se3::log_map;

    fn base_config() -> WorldConfig {
        WorldConfig {
            n_robots: 3,
            keyframes_per_robot: 40,
            seed: 11,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn zero_sigmas_reproduce_ground_truth_exactly() {
        let config = WorldConfig {
            odom_sigma_rot: 0.0,
            odom_sigma_trans: 0.0,
            ..base_config()
        };
        let world = generate(&config).unwrap();
        for robot in &world.robots {
            for (k, truth) in robot.ground_truth.iter().enumerate() {
                let key = GlobalKey::new(robot.robot_id, k as u64).unwrap();
                let estimate = &robot.graph.poses[&key];
                assert!((estimate.translation - truth.translation).norm() < 1.0e-9);
                assert!((estimate.rotation - truth.rotation).norm() < 1.0e-9);
            }
        }
    }

    #[test]
    fn zero_sigma_information_is_clamped_not_infinite() {
        let info = clamped_information(0.0, 0.0);
        let floor_info = 1.0 / (SIGMA_FLOOR * SIGMA_FLOOR);
        assert_eq!(info[(0, 0)], floor_info);
        assert_eq!(info[(3, 3)], floor_info);
        assert!(info.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn noise_matches_configured_sigmas_over_many_edges() {
        // Sampling oracle: the right-tangent residual of each odometry edge
        // against ground truth recovers the drawn twist exactly, so its
        // empirical standard deviation must approach the configured sigma.
        let config = WorldConfig {
            n_robots: 1,
            keyframes_per_robot: 10_001,
            arena_half_extent: 500.0,
            odom_sigma_rot: 0.01,
            odom_sigma_trans: 0.1,
            seed: 5,
            ..WorldConfig::default()
        };
        let world = generate(&config).unwrap();
        let robot = &world.robots[0];
        let mut rot_sq = 0.0;
        let mut trans_sq = 0.0;
        let mut count = 0.0;
        for k in 0..config.keyframes_per_robot - 1 {
            let truth = relative(
                &robot.ground_truth[k as usize],
                &robot.ground_truth[k as usize + 1],
            );
            let edge = &robot.graph.odometry[&k];
            let residual = log_map(&relative(&truth, &edge.relative_pose)).unwrap();
            rot_sq += residual.rot.norm_squared();
            trans_sq += residual.trans.norm_squared();
            count += 3.0;
        }
        let rot_std = (rot_sq / count).sqrt();
        let trans_std = (trans_sq / count).sqrt();
        assert!((rot_std - 0.01).abs() < 0.05 * 0.01, "rot std {rot_std}");
        assert!((trans_std - 0.1).abs() < 0.05 * 0.1, "trans std {trans_std}");
    }

    #[test]
    fn same_seed_gives_bitwise_identical_worlds() {
        let config = base_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        for (ra, rb) in a.robots.iter().zip(&b.robots) {
            for (pa, pb) in ra.ground_truth.iter().zip(&rb.ground_truth) {
                assert_eq!(pa.translation, pb.translation);
                assert_eq!(pa.rotation, pb.rotation);
            }
            for (ka, ea) in &ra.graph.odometry {
                let eb = &rb.graph.odometry[ka];
                assert_eq!(ea.relative_pose.translation, eb.relative_pose.translation);
                assert_eq!(ea.relative_pose.rotation, eb.relative_pose.rotation);
            }
        }
    }

    #[test]
    fn adding_a_robot_leaves_existing_robots_untouched() {
        let smaller = generate(&base_config()).unwrap();
        let larger = generate(&WorldConfig {
            n_robots: 4,
            ..base_config()
        })
        .unwrap();
        for robot in 0..3 {
            let a = &smaller.robots[robot].ground_truth;
            let b = &larger.robots[robot].ground_truth;
            for (pa, pb) in a.iter().zip(b) {
                assert_eq!(pa.translation, pb.translation);
                assert_eq!(pa.rotation, pb.rotation);
            }
        }
    }

    #[test]
    fn all_trajectories_stay_inside_the_arena() {
        for trajectory in [Trajectory::RandomWalk, Trajectory::Circle, Trajectory::GridLawnmower] {
            let config = WorldConfig {
                trajectory,
                keyframes_per_robot: 500,
                ..base_config()
            };
            let world = generate(&config).unwrap();
            for robot in &world.robots {
                for pose in &robot.ground_truth {
                    assert!(
                        pose.translation.x.abs() <= config.arena_half_extent
                            && pose.translation.y.abs() <= config.arena_half_extent,
                        "{trajectory:?} escaped at {}",
                        pose.translation
                    );
                }
            }
        }
    }

    #[test]
    fn robots_fly_at_distinct_altitudes() {
        let world = generate(&base_config()).unwrap();
        for robot in &world.robots {
            let altitude = robot.robot_id as f64 * world.config.altitude_spacing;
            for pose in &robot.ground_truth {
                assert_eq!(pose.translation.z, altitude);
            }
        }
    }

    #[test]
    fn circle_keeps_constant_radius() {
        let config = WorldConfig {
            trajectory: Trajectory::Circle,
            ..base_config()
        };
        let world = generate(&config).unwrap();
        let radius = config.arena_half_extent * 0.7;
        for robot in &world.robots {
            for pose in &robot.ground_truth {
                let r = (pose.translation.x.powi(2) + pose.translation.y.powi(2)).sqrt();
                assert!((r - radius).abs() < 1.0e-9);
            }
        }
    }

    #[test]
    fn odometry_chains_are_gapless() {
        let world = generate(&base_config()).unwrap();
        for robot in &world.robots {
            let last = world.config.keyframes_per_robot - 1;
            odometric_relative(
                &robot.graph,
                GlobalKey::new(robot.robot_id, 0).unwrap(),
                GlobalKey::new(robot.robot_id, last).unwrap(),
            )
            .unwrap();
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        for mutate in [
            |c: &mut WorldConfig| c.n_robots = 0,
            |c: &mut WorldConfig| c.keyframes_per_robot = 1,
            |c: &mut WorldConfig| c.arena_half_extent = -3.0,
            |c: &mut WorldConfig| c.odom_sigma_rot = -0.1,
            |c: &mut WorldConfig| c.step_length = 0.0,
        ] {
            let mut config = base_config();
            mutate(&mut config);
            assert!(generate(&config).is_err());
        }
    }

    #[test]
    fn ground_truth_document_has_vertices_only() {
        let world = generate(&base_config()).unwrap();
        let document = world.ground_truth_document();
        assert_eq!(
            document.poses.len(),
            (world.config.n_robots as u64 * world.config.keyframes_per_robot) as usize
        );
        assert!(document.edges.is_empty());
    }
}
