//! Pick/place retry layer: a weighted switcher over approach parameters.
//!
//! Each approach is a pre-grasp offset (meters, in the yaw-rotated target
//! frame) plus a yaw offset about vertical. A failure halves the active
//! approach's viability and moves to the highest-viability untried approach;
//! the attempt budget per subtask caps total tries, after which the layer
//! signals the discrete planner to abort the subtask.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::controller::GoalSpec;
use crate::geometry::{rotate_vector, Pose, UnitQuaternion};

/// One approach parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Approach {
    /// Pre-grasp offset in the yaw-rotated target frame, meters.
    pub offset: Vector3<f64>,
    /// Yaw offset about vertical, radians.
    pub yaw: f64,
}

/// Ordered approaches with per-approach viability weights in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachSet {
    pub approaches: Vec<Approach>,
    pub viability: Vec<f64>,
}

impl ApproachSet {
    pub fn new(approaches: Vec<Approach>) -> Self {
        assert!(!approaches.is_empty(), "approach set must be nonempty");
        let n = approaches.len();
        Self { approaches, viability: vec![1.0; n] }
    }

    /// Default set: four yaw offsets crossed with two pre-grasp heights.
    /// A small lateral component makes the yaw offsets geometrically
    /// distinct approach directions.
    pub fn default_grasp_set() -> Self {
        let yaws = [0.0, std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2];
        let heights = [0.10, 0.18];
        let mut approaches = Vec::with_capacity(yaws.len() * heights.len());
        for &h in &heights {
            for &y in &yaws {
                approaches.push(Approach { offset: Vector3::new(0.05, 0.0, h), yaw: y });
            }
        }
        Self::new(approaches)
    }
}

/// Signal produced by an observed outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryDirective {
    /// Success: the active approach is retained.
    Retain,
    /// Failure absorbed: a different approach is now active.
    Switched,
    /// The attempt budget is exhausted; the subtask should be abandoned.
    AbortSubtask,
}

/// Per-subtask retry state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryState {
    pub set: ApproachSet,
    pub active_index: usize,
    pub failures: Vec<u32>,
    pub attempts: u32,
    pub budget: u32,
    tried: Vec<bool>,
}

impl RetryState {
    pub fn new(set: ApproachSet, budget: u32) -> Self {
        assert!(budget >= 1);
        let n = set.approaches.len();
        Self { set, active_index: 0, failures: vec![0; n], attempts: 0, budget, tried: vec![false; n] }
    }

    pub fn active(&self) -> &Approach {
        &self.set.approaches[self.active_index]
    }

    /// Starts a fresh subtask: attempt count and tried-set reset, viabilities
    /// reset (no cross-episode learning).
    pub fn reset_for_subtask(&mut self) {
        self.attempts = 0;
        self.tried.iter_mut().for_each(|t| *t = false);
        self.set.viability.iter_mut().for_each(|v| *v = 1.0);
        self.failures.iter_mut().for_each(|f| *f = 0);
        self.active_index = 0;
    }

    /// The active approach composed onto a target pose.
    pub fn approach_pose(&self, target: &Pose) -> Pose {
        let a = self.active();
        let yaw = UnitQuaternion::from_yaw(a.yaw);
        Pose {
            t: target.t + rotate_vector(&yaw, a.offset),
            q: crate::geometry::hamilton_product(&yaw, &target.q)
                .expect("unit inputs")
                .canonicalized(),
        }
    }

    /// Extrinsic attractor for the lower-level controller at the composed
    /// approach pose (position component).
    pub fn current_goal(&self, target: &Pose, kappa: f64) -> GoalSpec {
        let pose = self.approach_pose(target);
        GoalSpec::position(pose.t, kappa)
    }

    /// Folds in an attempt outcome; on failure selects the highest-viability
    /// untried approach (ties break on the lower index).
    pub fn observe_outcome(&mut self, success: bool) -> RetryDirective {
        self.attempts += 1;
        self.tried[self.active_index] = true;
        if success {
            return RetryDirective::Retain;
        }
        self.failures[self.active_index] += 1;
        self.set.viability[self.active_index] *= 0.5;
        if self.attempts >= self.budget {
            return RetryDirective::AbortSubtask;
        }
        // Highest-viability untried approach; if every approach has been
        // tried, the highest-viability one overall.
        let pick_among = |untried_only: bool| {
            let mut best: Option<usize> = None;
            for i in 0..self.set.approaches.len() {
                if untried_only && self.tried[i] {
                    continue;
                }
                match best {
                    Some(b) if self.set.viability[i] <= self.set.viability[b] => {}
                    _ => best = Some(i),
                }
            }
            best
        };
        self.active_index = pick_among(true).or_else(|| pick_among(false)).unwrap_or(0);
        RetryDirective::Switched
    }
}
