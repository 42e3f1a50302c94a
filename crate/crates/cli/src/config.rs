//! Scenario configuration: a versioned TOML document mapped onto the core
//! config types. Unknown keys are rejected so a typo fails the load instead
//! of silently running with a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use peerslam_core::frontend::{FrontendConfig, FrontendMode};
use peerslam_core::network::NetworkConfig;
use peerslam_core::pcm::PcmConfig;
use peerslam_core::pgo::PgoConfig;
use peerslam_core::world::{Trajectory, WorldConfig};

use crate::{CliError, Result};

/// Config documents this build understands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Must equal [`SCHEMA_VERSION`].
    pub schema: u32,
    #[serde(default = "default_runs")]
    pub runs: u64,
    pub output_dir: PathBuf,
    /// Keyframes between repeat exchanges while a pair stays in range;
    /// 0 exchanges only when a pair first comes into range.
    #[serde(default = "default_rendezvous_interval")]
    pub rendezvous_interval: u64,
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub frontend: FrontendSection,
    #[serde(default)]
    pub pcm: PcmSection,
    #[serde(default)]
    pub pgo: PgoSection,
}

fn default_runs() -> u64 {
    1
}

fn default_rendezvous_interval() -> u64 {
    10
}

impl ScenarioConfig {
    /// Full validation: schema version, run count, and every sub-config.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema {} not supported, this build reads schema {SCHEMA_VERSION}",
                self.schema
            )));
        }
        if self.runs < 1 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir must not be empty".into()));
        }
        self.world.to_core().validate()?;
        self.network.to_core().validate()?;
        self.frontend.to_core().validate()?;
        self.pcm.to_core().validate()?;
        self.pgo.to_core().validate()?;
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ScenarioConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    RandomWalk,
    Circle,
    GridLawnmower,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub n_robots: u8,
    pub keyframes_per_robot: u64,
    pub trajectory: TrajectoryKind,
    pub arena_half_extent: f64,
    pub odom_sigma_rot: f64,
    pub odom_sigma_trans: f64,
    pub seed: u64,
    pub step_length: f64,
    pub yaw_sigma: f64,
    pub altitude_spacing: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let core = WorldConfig::default();
        Self {
            n_robots: core.n_robots,
            keyframes_per_robot: core.keyframes_per_robot,
            trajectory: TrajectoryKind::RandomWalk,
            arena_half_extent: core.arena_half_extent,
            odom_sigma_rot: core.odom_sigma_rot,
            odom_sigma_trans: core.odom_sigma_trans,
            seed: core.seed,
            step_length: core.step_length,
            yaw_sigma: core.yaw_sigma,
            altitude_spacing: core.altitude_spacing,
        }
    }
}

impl WorldSection {
    pub fn to_core(&self) -> WorldConfig {
        WorldConfig {
            n_robots: self.n_robots,
            keyframes_per_robot: self.keyframes_per_robot,
            trajectory: match self.trajectory {
                TrajectoryKind::RandomWalk => Trajectory::RandomWalk,
                TrajectoryKind::Circle => Trajectory::Circle,
                TrajectoryKind::GridLawnmower => Trajectory::GridLawnmower,
            },
            arena_half_extent: self.arena_half_extent,
            odom_sigma_rot: self.odom_sigma_rot,
            odom_sigma_trans: self.odom_sigma_trans,
            seed: self.seed,
            step_length: self.step_length,
            yaw_sigma: self.yaw_sigma,
            altitude_spacing: self.altitude_spacing,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub comm_range: f64,
    pub round_length: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let core = NetworkConfig::default();
        Self {
            comm_range: core.comm_range,
            round_length: core.round_length,
        }
    }
}

impl NetworkSection {
    pub fn to_core(&self) -> NetworkConfig {
        NetworkConfig {
            comm_range: self.comm_range,
            round_length: self.round_length,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontendModeKind {
    DirectInjection,
    DescriptorSim,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendSection {
    pub mode: FrontendModeKind,
    pub descriptor_match_threshold: f64,
    pub min_correspondences: u32,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub outlier_fraction: f64,
    pub outlier_rot_range: (f64, f64),
    pub outlier_trans_range: (f64, f64),
    pub mean_true_correspondences: f64,
    pub mean_aliased_correspondences: f64,
    pub place_cell_size: f64,
    pub descriptor_noise_sigma: f64,
    pub alias_wrap_cells: (u64, u64),
    pub descriptor_salt: u64,
}

impl Default for FrontendSection {
    fn default() -> Self {
        let core = FrontendConfig::default();
        Self {
            mode: FrontendModeKind::DirectInjection,
            descriptor_match_threshold: core.descriptor_match_threshold,
            min_correspondences: core.min_correspondences,
            sigma_rot: core.sigma_rot,
            sigma_trans: core.sigma_trans,
            outlier_fraction: core.outlier_fraction,
            outlier_rot_range: core.outlier_rot_range,
            outlier_trans_range: core.outlier_trans_range,
            mean_true_correspondences: core.mean_true_correspondences,
            mean_aliased_correspondences: core.mean_aliased_correspondences,
            place_cell_size: core.place_cell_size,
            descriptor_noise_sigma: core.descriptor_noise_sigma,
            alias_wrap_cells: core.alias_wrap_cells,
            descriptor_salt: core.descriptor_salt,
        }
    }
}

impl FrontendSection {
    pub fn to_core(&self) -> FrontendConfig {
        FrontendConfig {
            mode: match self.mode {
                FrontendModeKind::DirectInjection => FrontendMode::DirectInjection,
                FrontendModeKind::DescriptorSim => FrontendMode::DescriptorSim,
            },
            descriptor_match_threshold: self.descriptor_match_threshold,
            min_correspondences: self.min_correspondences,
            sigma_rot: self.sigma_rot,
            sigma_trans: self.sigma_trans,
            outlier_fraction: self.outlier_fraction,
            outlier_rot_range: self.outlier_rot_range,
            outlier_trans_range: self.outlier_trans_range,
            mean_true_correspondences: self.mean_true_correspondences,
            mean_aliased_correspondences: self.mean_aliased_correspondences,
            place_cell_size: self.place_cell_size,
            descriptor_noise_sigma: self.descriptor_noise_sigma,
            alias_wrap_cells: self.alias_wrap_cells,
            descriptor_salt: self.descriptor_salt,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcmSection {
    /// False bypasses consistency checking: every candidate is accepted.
    pub enabled: bool,
    pub likelihood_threshold: f64,
    pub exact_cap: usize,
}

impl Default for PcmSection {
    fn default() -> Self {
        let core = PcmConfig::default();
        Self {
            enabled: true,
            likelihood_threshold: core.likelihood_threshold,
            exact_cap: core.exact_cap,
        }
    }
}

impl PcmSection {
    pub fn to_core(&self) -> PcmConfig {
        PcmConfig {
            likelihood_threshold: self.likelihood_threshold,
            exact_cap: self.exact_cap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgoSection {
    pub rotation_stage_max_iters: u64,
    pub pose_stage_max_iters: u64,
    pub rel_change_tol: f64,
    pub pose_stage_relinearizations: u32,
}

impl Default for PgoSection {
    fn default() -> Self {
        let core = PgoConfig::default();
        Self {
            rotation_stage_max_iters: core.rotation_stage_max_iters,
            pose_stage_max_iters: core.pose_stage_max_iters,
            rel_change_tol: core.rel_change_tol,
            pose_stage_relinearizations: core.pose_stage_relinearizations,
        }
    }
}

impl PgoSection {
    pub fn to_core(&self) -> PgoConfig {
        PgoConfig {
            rotation_stage_max_iters: self.rotation_stage_max_iters,
            pose_stage_max_iters: self.pose_stage_max_iters,
            rel_change_tol: self.rel_change_tol,
            pose_stage_relinearizations: self.pose_stage_relinearizations,
        }
    }
}

/// Knobs a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    PcmThreshold,
    DescriptorMatchThreshold,
    MinCorrespondences,
}

impl SweepParameter {
    pub const NAMES: [&'static str; 3] = [
        "pcm_threshold",
        "descriptor_match_threshold",
        "min_correspondences",
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pcm_threshold" => Ok(Self::PcmThreshold),
            "descriptor_match_threshold" => Ok(Self::DescriptorMatchThreshold),
            "min_correspondences" => Ok(Self::MinCorrespondences),
            other => Err(CliError::UnknownParameter {
                name: other.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PcmThreshold => "pcm_threshold",
            Self::DescriptorMatchThreshold => "descriptor_match_threshold",
            Self::MinCorrespondences => "min_correspondences",
        }
    }

    /// Applies one sweep value, leaving everything else untouched.
    pub fn apply(&self, config: &mut ScenarioConfig, value: f64) -> Result<()> {
        match self {
            Self::PcmThreshold => config.pcm.likelihood_threshold = value,
            Self::DescriptorMatchThreshold => config.frontend.descriptor_match_threshold = value,
            Self::MinCorrespondences => {
                if !(value.is_finite() && value >= 0.0 && value.fract() == 0.0) {
                    return Err(CliError::Config(format!(
                        "min_correspondences needs a non-negative integer, got {value}"
                    )));
                }
                config.frontend.min_correspondences = value as u32;
            }
        }
        config.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        "schema = 1\noutput_dir = \"out\"\n".to_string()
    }

    #[test]
    fn minimal_document_gets_defaults_everywhere() {
        let config: ScenarioConfig = toml::from_str(&minimal_toml()).unwrap();
        config.validate().unwrap();
        assert_eq!(config.runs, 1);
        assert_eq!(config.rendezvous_interval, 10);
        assert_eq!(config.world.n_robots, 5);
        assert_eq!(config.pcm.likelihood_threshold, 0.01);
        assert!(config.pcm.enabled);
    }

    #[test]
    fn unknown_keys_fail_the_parse_at_every_level() {
        for document in [
            "schema = 1\noutput_dir = \"out\"\nbogus = 3\n",
            "schema = 1\noutput_dir = \"out\"\n[world]\nbogus = 3\n",
            "schema = 1\noutput_dir = \"out\"\n[pcm]\nthresold = 0.1\n",
        ] {
            assert!(
                toml::from_str::<ScenarioConfig>(document).is_err(),
                "accepted: {document}"
            );
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let config: ScenarioConfig =
            toml::from_str("schema = 99\noutput_dir = \"out\"\n").unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("schema"));
    }

    #[test]
    fn sub_config_validation_runs_at_load() {
        let document = "schema = 1\noutput_dir = \"out\"\n[world]\nn_robots = 0\n";
        let config: ScenarioConfig = toml::from_str(document).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_echo_round_trips_through_toml() {
        let mut config: ScenarioConfig = toml::from_str(&minimal_toml()).unwrap();
        config.world.keyframes_per_robot = 42;
        config.frontend.outlier_fraction = 0.25;
        let echo = toml::to_string(&config).unwrap();
        let back: ScenarioConfig = toml::from_str(&echo).unwrap();
        assert_eq!(back.world.keyframes_per_robot, 42);
        assert_eq!(back.frontend.outlier_fraction, 0.25);
        assert_eq!(echo, toml::to_string(&back).unwrap());
    }

    #[test]
    fn sweep_parameters_parse_and_apply() {
        let mut config: ScenarioConfig = toml::from_str(&minimal_toml()).unwrap();
        SweepParameter::parse("pcm_threshold")
            .unwrap()
            .apply(&mut config, 0.25)
            .unwrap();
        assert_eq!(config.pcm.likelihood_threshold, 0.25);
        SweepParameter::parse("min_correspondences")
            .unwrap()
            .apply(&mut config, 7.0)
            .unwrap();
        assert_eq!(config.frontend.min_correspondences, 7);
        assert!(SweepParameter::parse("min_correspondences")
            .unwrap()
            .apply(&mut config, 1.5)
            .is_err());
        let err = SweepParameter::parse("comm_range").unwrap_err();
        assert!(matches!(err, CliError::UnknownParameter { .. }));
    }
}
