//! Scenario file: robot geometry, controller tuning, simulator, mapping and
//! runner settings, loaded from TOML with environment-independent defaults.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::base::BaseGeometry;
use crate::controller::ControllerConfig;
use crate::geometry::{DHLink, GeometryError, KinematicChain, Pose, UnitQuaternion};
use crate::mapping::MapConfig;
use crate::sim::episode::{default_joint_limits, default_resting_joints};
use crate::sim::SimConfig;
use crate::skills::SkillGains;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario at {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("invalid chain: {0}")]
    Chain(#[from] GeometryError),
}

/// One DH row of the arm chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub theta0: f64,
    pub alpha: f64,
    pub l: f64,
    pub d: f64,
    pub actuated: bool,
}

/// Robot description: DH rows, mount pose on the base, joint limits and the
/// resting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotConfig {
    pub dh: Vec<DhRow>,
    /// Mount translation from the base frame to the chain root.
    pub mount_translation: [f64; 3],
    /// Mount yaw, radians.
    pub mount_yaw: f64,
    pub joint_limits: Vec<(f64, f64)>,
    pub resting_joints: Vec<f64>,
    pub base_geometry: BaseGeometry,
}

impl Default for RobotConfig {
    fn default() -> Self {
        let chain = crate::sim::episode::default_chain();
        let dh = chain
            .links
            .iter()
            .map(|l| DhRow { theta0: l.theta, alpha: l.alpha, l: l.l, d: l.d, actuated: l.actuated })
            .collect();
        Self {
            dh,
            mount_translation: [chain.base_pose.t.x, chain.base_pose.t.y, chain.base_pose.t.z],
            mount_yaw: 0.0,
            joint_limits: default_joint_limits(),
            resting_joints: default_resting_joints(),
            base_geometry: BaseGeometry::default(),
        }
    }
}

impl RobotConfig {
    pub fn chain(&self) -> Result<KinematicChain, ConfigError> {
        let links = self
            .dh
            .iter()
            .map(|r| DHLink::new(r.theta0, r.alpha, r.l, r.d, r.actuated))
            .collect();
        let mount = Pose::new(
            nalgebra::Vector3::new(
                self.mount_translation[0],
                self.mount_translation[1],
                self.mount_translation[2],
            ),
            UnitQuaternion::from_yaw(self.mount_yaw),
        );
        Ok(KinematicChain::new(links, mount)?)
    }
}

/// Runner-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunnerConfig {
    /// Simulated-time cap per episode, seconds.
    pub episode_time_limit: f64,
    /// Retry attempts per pick/place subtask.
    pub retry_budget: u32,
    /// Disable the retry layer (single attempt per subtask).
    pub disable_retry: bool,
    /// Plan on the ground-truth obstacle rasterization instead of the
    /// streaming map.
    pub ground_truth_map: bool,
    /// Surface points sampled into the map at episode start.
    pub mapping_points: usize,
    /// Manipulation success probability assumed by the discrete model.
    pub model_p_succ: f64,
    /// Policy enumeration horizon.
    pub horizon: usize,
    /// Obstacle inflation radius for planning, meters.
    pub inflation: f64,
    /// Planning grid resolution, meters per cell.
    pub grid_resolution: f64,
    /// Emit one tick record per this many control ticks.
    pub log_every: usize,
    /// Repulsor refresh period, in control ticks.
    pub repulsor_every: usize,
    /// Repulsor activation radius (m) and gain.
    pub repulsor_gamma: f64,
    pub repulsor_gain: f64,
    /// Move attempts per navigation target before giving up the subtask.
    pub move_attempts: u32,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self {
            episode_time_limit: 900.0,
            retry_budget: 4,
            disable_retry: false,
            ground_truth_map: false,
            mapping_points: 4000,
            model_p_succ: 0.85,
            horizon: 4,
            inflation: 0.3,
            grid_resolution: 0.1,
            log_every: 5,
            repulsor_every: 5,
            repulsor_gamma: 0.25,
            repulsor_gain: 0.02,
            move_attempts: 3,
        }
    }
}

/// The full scenario: robot plus every subsystem's tuning.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub robot: RobotConfig,
    pub controller: ControllerConfig,
    pub sim: SimConfig,
    pub map: MapConfig,
    pub skills: SkillGains,
    pub runner: RunnerConfig,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let scenario: Scenario = toml::from_str(&text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, reason: &str| ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        };
        if self.robot.dh.is_empty() {
            return Err(invalid("robot.dh", "chain must have at least one link"));
        }
        let dof = self.robot.dh.iter().filter(|r| r.actuated).count();
        if self.robot.joint_limits.len() != dof {
            return Err(invalid("robot.joint_limits", "must match the number of actuated links"));
        }
        if self.robot.resting_joints.len() != dof {
            return Err(invalid("robot.resting_joints", "must match the number of actuated links"));
        }
        for (i, row) in self.robot.dh.iter().enumerate() {
            if row.l < 0.0 || !row.d.is_finite() || row.alpha.abs() > std::f64::consts::PI {
                return Err(invalid(&format!("robot.dh[{i}]"), "l ≥ 0, d finite, |alpha| ≤ π"));
            }
        }
        if self.controller.dt <= 0.0 {
            return Err(invalid("controller.dt", "must be positive"));
        }
        if self.controller.belief_substeps == 0 {
            return Err(invalid("controller.belief_substeps", "must be at least 1"));
        }
        if self.runner.episode_time_limit <= 0.0 {
            return Err(invalid("runner.episode_time_limit", "must be positive"));
        }
        if self.runner.retry_budget < 1 {
            return Err(invalid("runner.retry_budget", "must be at least 1"));
        }
        if self.runner.grid_resolution <= 0.0 {
            return Err(invalid("runner.grid_resolution", "must be positive"));
        }
        if self.map.components == 0 {
            return Err(invalid("map.components", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_is_valid_and_round_trips() {
        let s = Scenario::default();
        s.validate().unwrap();
        let text = s.to_toml();
        let back: Scenario = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn chain_builds_from_robot_config() {
        let s = Scenario::default();
        let chain = s.robot.chain().unwrap();
        assert_eq!(chain.dof(), 7);
    }

    #[test]
    fn invalid_fields_are_reported_with_paths() {
        let mut s = Scenario::default();
        s.controller.dt = 0.0;
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("controller.dt"), "{err}");

        let mut s = Scenario::default();
        s.robot.joint_limits.pop();
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("joint_limits"), "{err}");
    }

    #[test]
    fn load_reports_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "controller = 3").unwrap();
        assert!(matches!(Scenario::load(&path), Err(ConfigError::Parse(_))));
    }
}
