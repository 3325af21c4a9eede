//! Continuous whole-body control as free-energy gradient flow over a
//! hierarchy of generalized beliefs.
//!
//! The hierarchy has a differential-drive base level and one level per arm
//! link. Each level holds intrinsic beliefs `μ_i` (wheel rotations for the
//! base; joint angle and link length for arm levels) and extrinsic beliefs
//! `μ_e` (planar pose for the base; 7-D link pose for arm levels), each with
//! a first temporal derivative. With prediction errors
//!
//! ```text
//! ε_p = s_p − μ_i-slice            proprioceptive
//! ε_v = s_v − μ_e-slice            visual
//! ε_e = μ_e − g_e(μ_i, parent)     extrinsic (per level)
//! ε_μ = μ' − f(μ)                  dynamics (per field)
//! ```
//!
//! the per-level updates are
//!
//! ```text
//! dμ_i  = μ_i' + π_p ε_p + ∂_{μi}g_e^T π_e ε_e + ∂f_i^T π_μi ε_μi
//! dμ_i' = −π_μi ε_μi
//! dμ_e  = μ_e' − π_e ε_e + ∂_{μe}g_e^{above,T} π_e^{above} ε_e^{above}
//!         + π_v ε_v + ∂f_e^T π_μe ε_μe
//! dμ_e' = −π_μe ε_μe
//! ```
//!
//! i.e. exact descent on the quadratic free energy plus the generalized
//! shift, with the from-above pull absent at the top level. The base deviates
//! in two places: its extrinsic update has no from-above term (the previous
//! pose entering its model is a constant snapshot, not a belief), and its
//! wheel update mixes the base's own extrinsic error with a pulled-back arm
//! error,
//!
//! ```text
//! dμ_i^base ⊇ ∂_{μi}g_base^T π_e^base (κ_base ε_e^base + κ_arm P ε_e^arm)
//! ```
//!
//! where `P` maps the coupled arm level's 7-D error into base-pose
//! coordinates through the root transform. This is what lets base motion
//! serve arm reach; with `κ_arm = 0` the base update reduces exactly to the
//! standalone model.
//!
//! Actions minimize the proprioceptive free energy under velocity actuation:
//! `da = gain · (δt π_p ε_p + w π_p ε_p')` per joint and wheel, integrated and
//! clamped to rate limits.

mod goals;

pub use goals::{dynamics_function, BeliefField, GoalSpec, RepulsorMode, RepulsorSpec};

use nalgebra::{DMatrix, DVector, Matrix3xX, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{
    base_ge, grad_base_intrinsic, wheel_velocities, BaseExtrinsic, BaseGeometry,
};
use crate::geometry::{
    chain_step_raw, compose_raw, grad_chain_extrinsic, grad_chain_intrinsic, grad_compose_first,
    wrap_angle, DHLink, KinematicChain,
};

pub type Vec7 = SMatrix<f64, 7, 1>;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("model shape error: {0}")]
    ModelShape(String),
    #[error("numerical divergence at level {level} (0 = base, 1.. = arm links)")]
    NumericalDivergence { level: usize },
}

/// A belief vector and its first temporal derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedBelief {
    pub mu: DVector<f64>,
    pub mu_prime: DVector<f64>,
}

impl GeneralizedBelief {
    pub fn zeros(dim: usize) -> Self {
        Self { mu: DVector::zeros(dim), mu_prime: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite()) && self.mu_prime.iter().all(|v| v.is_finite())
    }
}

/// Per-modality precision weights of one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSet {
    pub pi_p: f64,
    pub pi_v: f64,
    pub pi_e: f64,
    pub pi_mu_i: f64,
    pub pi_mu_e: f64,
}

impl Default for PrecisionSet {
    fn default() -> Self {
        Self { pi_p: 1.0, pi_v: 0.5, pi_e: 1.0, pi_mu_i: 0.1, pi_mu_e: 0.1 }
    }
}

/// One block of the hierarchy: beliefs, precisions, and the goals/repulsors
/// shaping its dynamics functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelState {
    pub intrinsic: GeneralizedBelief,
    pub extrinsic: GeneralizedBelief,
    pub precisions: PrecisionSet,
    pub goals: Vec<GoalSpec>,
    pub repulsors: Vec<RepulsorSpec>,
}

impl LevelState {
    fn new(intrinsic_dim: usize, extrinsic_dim: usize, precisions: PrecisionSet) -> Self {
        Self {
            intrinsic: GeneralizedBelief::zeros(intrinsic_dim),
            extrinsic: GeneralizedBelief::zeros(extrinsic_dim),
            precisions,
            goals: Vec::new(),
            repulsors: Vec::new(),
        }
    }
}

/// Ground-truth sensor snapshot for one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    /// Cumulative wheel rotations (right, left), radians.
    pub wheel_angles: Vector2<f64>,
    /// Wheel angular rates, rad/s.
    pub wheel_rates: Vector2<f64>,
    /// Base pose (x, y, θ).
    pub base_pose: Vector3<f64>,
    /// Arm joint angles in chain (DH) coordinates, one per link.
    pub joint_angles: DVector<f64>,
    /// Arm joint rates, rad/s.
    pub joint_rates: DVector<f64>,
    /// World positions of every link, for the visual error.
    pub link_positions: Vec<Vector3<f64>>,
}

/// Prediction errors of one level at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSet {
    pub eps_p: DVector<f64>,
    pub eps_p_prime: DVector<f64>,
    pub eps_v: DVector<f64>,
    pub eps_e: DVector<f64>,
    pub eps_mu_i: DVector<f64>,
    pub eps_mu_e: DVector<f64>,
}

/// Level address: the base or an arm link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelId {
    Base,
    Arm(usize),
}

/// Integrated action state: commanded wheel and joint rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionState {
    pub wheel_rates: Vector2<f64>,
    pub joint_rates: DVector<f64>,
}

/// The 10-DoF command emitted each tick: base twist, joint rates, gripper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub base_v: f64,
    pub base_omega: f64,
    pub joint_rates: DVector<f64>,
    pub gripper: f64,
}

/// Tuning and structural configuration of the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Euler integration step, seconds.
    pub dt: f64,
    pub base_precisions: PrecisionSet,
    pub arm_precisions: PrecisionSet,
    /// Weight on the base's own extrinsic error in the wheel update.
    pub kappa_base: f64,
    /// Relative weight of the heading component inside that error; the
    /// track-width lever (r/l vs r/2) makes heading errors several times
    /// stronger per radian than position errors per meter, so the mix is
    /// rebalanced before entering the wheel Jacobian.
    pub base_heading_weight: f64,
    /// Weight on the pulled-back arm error in the wheel update.
    pub kappa_arm: f64,
    /// Which arm level's extrinsic error couples into the base (default: the
    /// first link above the base).
    pub arm_coupling_level: usize,
    pub action_gain_arm: f64,
    pub action_gain_base: f64,
    /// Weight of the rate-observation row of ∂s̃_p/∂a.
    pub action_velocity_weight_arm: f64,
    pub action_velocity_weight_base: f64,
    pub joint_rate_limit: f64,
    pub wheel_rate_limit: f64,
    /// When false, link-length beliefs stay at their configured values.
    pub estimate_lengths: bool,
    /// Euler substeps of the belief flow per control tick. Observations are
    /// held fixed within a tick; substepping integrates the same flow at
    /// `dt / belief_substeps`, which raises the explicit-Euler stability
    /// ceiling on precisions and attractor stiffness by the same factor.
    pub belief_substeps: usize,
    /// Anti-windup: wheel-angle beliefs may lead the observed angles by at
    /// most this many radians. Bounds the displacement stored in the wheel
    /// lead so reversals don't lag behind sign flips of the pose error.
    pub wheel_lead_limit: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            base_precisions: PrecisionSet {
                pi_p: 0.05,
                pi_v: 2.0,
                pi_e: 8.0,
                pi_mu_i: 0.1,
                pi_mu_e: 0.2,
            },
            // Hand-tuned whole-body profile. Transmission of task errors down
            // a 7-level chain needs stiff chain precision relative to the
            // visual anchors, and the proprioceptive anchor soft enough that
            // leads (which the action law amplifies) can form.
            arm_precisions: PrecisionSet {
                pi_p: 0.2,
                pi_v: 3.0,
                pi_e: 30.0,
                pi_mu_i: 0.1,
                pi_mu_e: 0.2,
            },
            kappa_base: 150.0,
            base_heading_weight: 0.1,
            kappa_arm: 450.0,
            arm_coupling_level: 0,
            action_gain_arm: 350.0,
            action_gain_base: 1600.0,
            action_velocity_weight_arm: 0.015,
            action_velocity_weight_base: 0.02,
            joint_rate_limit: 1.8,
            wheel_rate_limit: 8.0,
            estimate_lengths: false,
            belief_substeps: 6,
            wheel_lead_limit: 2.5,
        }
    }
}

/// The full whole-body hierarchy: base level plus one level per arm link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WholeBodyModel {
    pub base: LevelState,
    pub arm_levels: Vec<LevelState>,
    /// Link constants (α, d) and default θ, l; `base_pose` is the mount
    /// transform from the base frame to the chain root.
    pub chain: KinematicChain,
    pub geom: BaseGeometry,
    pub config: ControllerConfig,
    pub actions: ActionState,
    /// Joint-angle belief bounds (chain coordinates); beliefs are clamped to
    /// this band at integration so unreachable targets cannot push them far
    /// beyond the physical limits.
    pub joint_belief_limits: Option<Vec<(f64, f64)>>,
    /// Previous-step pose/wheel constants entering the base model.
    prev_base_pose: Vector3<f64>,
    prev_wheels: Vector2<f64>,
}

/// Per-level free-energy terms, for diagnostics and descent checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEnergy {
    pub level: usize,
    pub proprioceptive: f64,
    pub visual: f64,
    pub extrinsic: f64,
    pub dyn_intrinsic: f64,
    pub dyn_extrinsic: f64,
}

impl LevelEnergy {
    pub fn total(&self) -> f64 {
        self.proprioceptive + self.visual + self.extrinsic + self.dyn_intrinsic + self.dyn_extrinsic
    }
}

struct LevelDelta {
    d_mu_i: DVector<f64>,
    d_mu_i_prime: DVector<f64>,
    d_mu_e: DVector<f64>,
    d_mu_e_prime: DVector<f64>,
}

impl WholeBodyModel {
    pub fn new(chain: KinematicChain, geom: BaseGeometry, config: ControllerConfig) -> Self {
        let n = chain.links.len();
        assert!(
            chain.links.iter().all(|l| l.actuated),
            "whole-body model requires every chain link to be actuated"
        );
        let base = LevelState::new(2, 3, config.base_precisions);
        let mut arm_levels = Vec::with_capacity(n);
        for _ in 0..n {
            arm_levels.push(LevelState::new(2, 7, config.arm_precisions));
        }
        let joint_rates = DVector::zeros(n);
        let mut model = Self {
            base,
            arm_levels,
            chain,
            geom,
            config,
            actions: ActionState { wheel_rates: Vector2::zeros(), joint_rates },
            joint_belief_limits: None,
            prev_base_pose: Vector3::zeros(),
            prev_wheels: Vector2::zeros(),
        };
        // Start beliefs on the chain's default configuration.
        for (j, link) in model.chain.links.iter().enumerate() {
            model.arm_levels[j].intrinsic.mu[0] = link.theta;
            model.arm_levels[j].intrinsic.mu[1] = link.l;
        }
        model
    }

    pub fn num_arm_levels(&self) -> usize {
        self.arm_levels.len()
    }

    /// Index of the end-effector level.
    pub fn ee_level(&self) -> usize {
        self.arm_levels.len() - 1
    }

    /// Resets beliefs onto the observations: intrinsic beliefs take the
    /// observed values, extrinsic beliefs the chained predictions, all
    /// derivatives zero. Errors are exactly zero afterwards (visual included,
    /// when the observations come from the same chain).
    pub fn align_to_observations(&mut self, obs: &Observations) -> Result<(), ControllerError> {
        self.check_shapes(obs)?;
        self.base.intrinsic.mu = DVector::from_column_slice(obs.wheel_angles.as_slice());
        self.base.intrinsic.mu_prime = DVector::zeros(2);
        self.base.extrinsic.mu = DVector::from_column_slice(obs.base_pose.as_slice());
        self.base.extrinsic.mu_prime = DVector::zeros(3);
        for j in 0..self.arm_levels.len() {
            self.arm_levels[j].intrinsic.mu[0] = obs.joint_angles[j];
            self.arm_levels[j].intrinsic.mu[1] = self.chain.links[j].l;
            self.arm_levels[j].intrinsic.mu_prime = DVector::zeros(2);
        }
        let mut parent = self.root_pose_raw();
        for j in 0..self.arm_levels.len() {
            let link = self.effective_link(j);
            let out = chain_step_raw(&link, &parent);
            self.arm_levels[j].extrinsic.mu = DVector::from_column_slice(out.as_slice());
            self.arm_levels[j].extrinsic.mu_prime = DVector::zeros(7);
            parent = out;
        }
        self.prev_base_pose = obs.base_pose;
        self.prev_wheels = obs.wheel_angles;
        self.actions.wheel_rates = Vector2::zeros();
        self.actions.joint_rates = DVector::zeros(self.arm_levels.len());
        Ok(())
    }

    fn check_shapes(&self, obs: &Observations) -> Result<(), ControllerError> {
        let n = self.arm_levels.len();
        if obs.joint_angles.len() != n
            || obs.joint_rates.len() != n
            || obs.link_positions.len() != n
        {
            return Err(ControllerError::ModelShape(format!(
                "observations sized for {} links, model has {}",
                obs.joint_angles.len(),
                n
            )));
        }
        Ok(())
    }

    /// DH link of arm level `j` with the belief-backed θ and l substituted.
    pub fn effective_link(&self, j: usize) -> DHLink {
        let c = &self.chain.links[j];
        DHLink {
            theta: self.arm_levels[j].intrinsic.mu[0],
            l: self.arm_levels[j].intrinsic.mu[1],
            ..*c
        }
    }

    /// Chain root pose (7-vector) generated from the base extrinsic belief
    /// through the planar lift and the mount transform.
    pub fn root_pose_raw(&self) -> Vec7 {
        let b = &self.base.extrinsic.mu;
        let lifted = lift_planar(b[0], b[1], b[2]);
        let mount = &self.chain.base_pose;
        compose_raw(&lifted, &mount.t, &mount.q.as_vector())
    }

    /// ∂(root pose)/∂(base extrinsic belief), 3 × 7.
    pub fn root_jacobian(&self) -> Matrix3xX<f64> {
        let b = &self.base.extrinsic.mu;
        let lifted = lift_planar(b[0], b[1], b[2]);
        let mount = &self.chain.base_pose;
        let j_lift = lift_planar_jacobian(b[2]);
        let j_comp = grad_compose_first(&lifted, &mount.t, &mount.q.as_vector());
        let mut out = Matrix3xX::zeros(7);
        let prod = j_lift * j_comp;
        for r in 0..3 {
            for c in 0..7 {
                out[(r, c)] = prod[(r, c)];
            }
        }
        out
    }

    /// Parent pose (7-vector) feeding arm level `j`'s generative model.
    fn parent_pose_raw(&self, j: usize) -> Vec7 {
        if j == 0 {
            self.root_pose_raw()
        } else {
            Vec7::from_column_slice(self.arm_levels[j - 1].extrinsic.mu.as_slice())
        }
    }

    /// Prediction errors of one level against the given observations.
    pub fn prediction_errors(
        &self,
        level: LevelId,
        obs: &Observations,
    ) -> Result<ErrorSet, ControllerError> {
        self.check_shapes(obs)?;
        Ok(match level {
            LevelId::Base => self.base_errors(obs),
            LevelId::Arm(j) => self.arm_errors(j, obs),
        })
    }

    fn base_errors(&self, obs: &Observations) -> ErrorSet {
        let lv = &self.base;
        let eps_p = DVector::from_vec(vec![
            obs.wheel_angles[0] - lv.intrinsic.mu[0],
            obs.wheel_angles[1] - lv.intrinsic.mu[1],
        ]);
        let eps_p_prime = DVector::from_vec(vec![
            obs.wheel_rates[0] - lv.intrinsic.mu_prime[0],
            obs.wheel_rates[1] - lv.intrinsic.mu_prime[1],
        ]);
        let eps_v = DVector::from_vec(vec![
            obs.base_pose[0] - lv.extrinsic.mu[0],
            obs.base_pose[1] - lv.extrinsic.mu[1],
            wrap_angle(obs.base_pose[2] - lv.extrinsic.mu[2]),
        ]);
        let pred = self.base_prediction();
        let eps_e = DVector::from_vec(vec![
            lv.extrinsic.mu[0] - pred[0],
            lv.extrinsic.mu[1] - pred[1],
            wrap_angle(lv.extrinsic.mu[2] - pred[2]),
        ]);
        let (f_i, _) = dynamics_function(&lv.intrinsic.mu, BeliefField::Intrinsic, &lv.goals, &lv.repulsors);
        let (f_e, _) = dynamics_function(&lv.extrinsic.mu, BeliefField::Extrinsic, &lv.goals, &lv.repulsors);
        ErrorSet {
            eps_p,
            eps_p_prime,
            eps_v,
            eps_e,
            eps_mu_i: &lv.intrinsic.mu_prime - f_i,
            eps_mu_e: &lv.extrinsic.mu_prime - f_e,
        }
    }

    /// Odometry prediction of the base pose from wheel beliefs and the
    /// previous-step constants.
    fn base_prediction(&self) -> Vector3<f64> {
        let dphi = Vector2::new(
            self.base.intrinsic.mu[0] - self.prev_wheels[0],
            self.base.intrinsic.mu[1] - self.prev_wheels[1],
        );
        let prev = BaseExtrinsic::new(self.prev_base_pose[0], self.prev_base_pose[1], self.prev_base_pose[2]);
        base_ge(dphi, &prev, &self.geom).as_vector()
    }

    fn arm_errors(&self, j: usize, obs: &Observations) -> ErrorSet {
        let lv = &self.arm_levels[j];
        let eps_p = DVector::from_vec(vec![obs.joint_angles[j] - lv.intrinsic.mu[0], 0.0]);
        let eps_p_prime = DVector::from_vec(vec![obs.joint_rates[j] - lv.intrinsic.mu_prime[0], 0.0]);
        let mut eps_v = DVector::zeros(7);
        for c in 0..3 {
            eps_v[c] = obs.link_positions[j][c] - lv.extrinsic.mu[c];
        }
        let parent = self.parent_pose_raw(j);
        let pred = chain_step_raw(&self.effective_link(j), &parent);
        let mu_e = Vec7::from_column_slice(lv.extrinsic.mu.as_slice());
        let eps_e = DVector::from_column_slice((mu_e - pred).as_slice());
        let (f_i, _) = dynamics_function(&lv.intrinsic.mu, BeliefField::Intrinsic, &lv.goals, &lv.repulsors);
        let (f_e, _) = dynamics_function(&lv.extrinsic.mu, BeliefField::Extrinsic, &lv.goals, &lv.repulsors);
        ErrorSet {
            eps_p,
            eps_p_prime,
            eps_v,
            eps_e,
            eps_mu_i: &lv.intrinsic.mu_prime - f_i,
            eps_mu_e: &lv.extrinsic.mu_prime - f_e,
        }
    }

    fn all_errors(&self, obs: &Observations) -> Vec<ErrorSet> {
        let mut out = Vec::with_capacity(1 + self.arm_levels.len());
        out.push(self.base_errors(obs));
        for j in 0..self.arm_levels.len() {
            out.push(self.arm_errors(j, obs));
        }
        out
    }

    /// Belief derivative of one arm level. `errors[0]` is the base level,
    /// `errors[1 + j]` arm level `j`.
    fn arm_level_delta(&self, j: usize, errors: &[ErrorSet]) -> LevelDelta {
        let lv = &self.arm_levels[j];
        let pi = lv.precisions;
        let own = &errors[1 + j];
        let parent = self.parent_pose_raw(j);
        let link = self.effective_link(j);

        let (_, jf_i) = dynamics_function(&lv.intrinsic.mu, BeliefField::Intrinsic, &lv.goals, &lv.repulsors);
        let (_, jf_e) = dynamics_function(&lv.extrinsic.mu, BeliefField::Extrinsic, &lv.goals, &lv.repulsors);

        // Intrinsic row: own-level extrinsic error through ∂g/∂μ_i.
        let j_i = grad_chain_intrinsic(&link, &parent);
        let eps_e7 = Vec7::from_column_slice(own.eps_e.as_slice());
        let chain_pull = j_i * (eps_e7 * pi.pi_e);
        let mut d_mu_i = lv.intrinsic.mu_prime.clone();
        d_mu_i += pi.pi_p * &own.eps_p;
        d_mu_i[0] += chain_pull[0];
        d_mu_i[1] += chain_pull[1];
        d_mu_i += &jf_i * (pi.pi_mu_i * &own.eps_mu_i);
        let mut d_mu_i_prime = -pi.pi_mu_i * own.eps_mu_i.clone();
        if !self.config.estimate_lengths {
            d_mu_i[1] = 0.0;
            d_mu_i_prime[1] = 0.0;
        }

        // Extrinsic row: self term, pull from the level above (absent at the
        // top), visual term, dynamics term.
        let mut d_mu_e = lv.extrinsic.mu_prime.clone();
        d_mu_e -= pi.pi_e * &own.eps_e;
        if j + 1 < self.arm_levels.len() {
            let above = &errors[2 + j];
            let pi_above = self.arm_levels[j + 1].precisions.pi_e;
            let link_above = self.effective_link(j + 1);
            let mu_e7 = Vec7::from_column_slice(lv.extrinsic.mu.as_slice());
            let j_e = grad_chain_extrinsic(&link_above, &mu_e7);
            let eps_above = Vec7::from_column_slice(above.eps_e.as_slice());
            let pull = j_e * (eps_above * pi_above);
            d_mu_e += DVector::from_column_slice(pull.as_slice());
        }
        d_mu_e += pi.pi_v * &own.eps_v;
        d_mu_e += &jf_e * (pi.pi_mu_e * &own.eps_mu_e);
        let d_mu_e_prime = -pi.pi_mu_e * own.eps_mu_e.clone();

        LevelDelta { d_mu_i, d_mu_i_prime, d_mu_e, d_mu_e_prime }
    }

    /// Wheel-belief derivative with the whole-body coupling term, plus the
    /// base extrinsic derivative. With `kappa_arm = 0` and `kappa_base = 1`
    /// this is exactly the standalone base update.
    fn base_delta(&self, errors: &[ErrorSet]) -> LevelDelta {
        let lv = &self.base;
        let pi = lv.precisions;
        let own = &errors[0];

        let (_, jf_i) = dynamics_function(&lv.intrinsic.mu, BeliefField::Intrinsic, &lv.goals, &lv.repulsors);
        let (_, jf_e) = dynamics_function(&lv.extrinsic.mu, BeliefField::Extrinsic, &lv.goals, &lv.repulsors);

        // Mixed extrinsic drive: own pose error plus the pulled-back arm error.
        let mut mix = self.config.kappa_base * own.eps_e.clone();
        if self.config.kappa_arm != 0.0 && !self.arm_levels.is_empty() {
            let pulled = self.pull_back_arm_error(errors);
            mix += self.config.kappa_arm * pulled;
        }
        mix[2] *= self.config.base_heading_weight;

        let prev = BaseExtrinsic::new(self.prev_base_pose[0], self.prev_base_pose[1], self.prev_base_pose[2]);
        let j_i = grad_base_intrinsic(&prev, &self.geom);
        let drive = j_i * Vector3::new(mix[0], mix[1], mix[2]) * pi.pi_e;

        let mut d_mu_i = lv.intrinsic.mu_prime.clone();
        d_mu_i += pi.pi_p * &own.eps_p;
        d_mu_i[0] += drive[0];
        d_mu_i[1] += drive[1];
        d_mu_i += &jf_i * (pi.pi_mu_i * &own.eps_mu_i);
        let d_mu_i_prime = -pi.pi_mu_i * own.eps_mu_i.clone();

        // Base extrinsic: no from-above term; the previous pose entering the
        // arm root is a snapshot, not this belief.
        let mut d_mu_e = lv.extrinsic.mu_prime.clone();
        d_mu_e -= pi.pi_e * &own.eps_e;
        d_mu_e += pi.pi_v * &own.eps_v;
        d_mu_e += &jf_e * (pi.pi_mu_e * &own.eps_mu_e);
        let d_mu_e_prime = -pi.pi_mu_e * own.eps_mu_e.clone();

        LevelDelta { d_mu_i, d_mu_i_prime, d_mu_e, d_mu_e_prime }
    }

    /// Maps the coupled arm level's extrinsic error into base-pose
    /// coordinates through the chained extrinsic Jacobians down to the root.
    fn pull_back_arm_error(&self, errors: &[ErrorSet]) -> DVector<f64> {
        let lvl = self.config.arm_coupling_level.min(self.arm_levels.len() - 1);
        let mut j_acc = {
            let root = self.root_pose_raw();
            let link0 = self.effective_link(0);
            let j_root = self.root_jacobian();
            let j0 = grad_chain_extrinsic(&link0, &root);
            let mut m = DMatrix::zeros(3, 7);
            let prod = j_root * j0;
            for r in 0..3 {
                for c in 0..7 {
                    m[(r, c)] = prod[(r, c)];
                }
            }
            m
        };
        for k in 1..=lvl {
            let parent = self.parent_pose_raw(k);
            let link = self.effective_link(k);
            let j_k = grad_chain_extrinsic(&link, &parent);
            let mut j_dyn = DMatrix::zeros(7, 7);
            for r in 0..7 {
                for c in 0..7 {
                    j_dyn[(r, c)] = j_k[(r, c)];
                }
            }
            j_acc *= j_dyn;
        }
        let eps = &errors[1 + lvl].eps_e;
        j_acc * eps
    }

    /// One belief update for a single level, exposed for inspection; `step`
    /// applies these for all levels simultaneously.
    pub fn update_level(
        &self,
        level: LevelId,
        obs: &Observations,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>), ControllerError> {
        self.check_shapes(obs)?;
        let errors = self.all_errors(obs);
        let d = match level {
            LevelId::Base => self.base_delta(&errors),
            LevelId::Arm(j) => self.arm_level_delta(j, &errors),
        };
        Ok((d.d_mu_i, d.d_mu_i_prime, d.d_mu_e, d.d_mu_e_prime))
    }

    /// Action derivative from the generalized proprioceptive errors under
    /// velocity actuation (`∂s_p/∂a = I δt`, `∂s_p'/∂a = w I`).
    pub fn action_update(&self, errors_base: &ErrorSet, errors_arm: &[ErrorSet]) -> (Vector2<f64>, DVector<f64>) {
        let cfg = &self.config;
        let dt = cfg.dt;
        let pi_b = self.base.precisions.pi_p;
        let da_wheels = Vector2::new(
            cfg.action_gain_base
                * pi_b
                * (-dt * errors_base.eps_p[0] - cfg.action_velocity_weight_base * errors_base.eps_p_prime[0]),
            cfg.action_gain_base
                * pi_b
                * (-dt * errors_base.eps_p[1] - cfg.action_velocity_weight_base * errors_base.eps_p_prime[1]),
        );
        let mut da_joints = DVector::zeros(self.arm_levels.len());
        for j in 0..self.arm_levels.len() {
            let pi = self.arm_levels[j].precisions.pi_p;
            da_joints[j] = cfg.action_gain_arm
                * pi
                * (-dt * errors_arm[j].eps_p[0] - cfg.action_velocity_weight_arm * errors_arm[j].eps_p_prime[0]);
        }
        (da_wheels, da_joints)
    }

    /// One Euler tick: belief updates for every level, action integration,
    /// and the 10-DoF command. The gripper scalar is passed through from the
    /// active skill.
    pub fn step(&mut self, obs: &Observations, gripper: f64) -> Result<ActionCommand, ControllerError> {
        self.check_shapes(obs)?;
        let dt = self.config.dt;
        let n_sub = self.config.belief_substeps.max(1);
        let dt_sub = dt / n_sub as f64;

        let mut errors = self.all_errors(obs);
        // Action derivative from the tick-start errors.
        let (da_wheels, da_joints) = self.action_update(&errors[0], &errors[1..]);

        for sub in 0..n_sub {
            if sub > 0 {
                errors = self.all_errors(obs);
            }
            let base_delta = self.base_delta(&errors);
            let arm_deltas: Vec<LevelDelta> =
                (0..self.arm_levels.len()).map(|j| self.arm_level_delta(j, &errors)).collect();

            apply_delta(&mut self.base, &base_delta, dt_sub);
            self.base.extrinsic.mu[2] = wrap_angle(self.base.extrinsic.mu[2]);
            // Anti-windup on the wheel-angle lead.
            let lim = self.config.wheel_lead_limit;
            for i in 0..2 {
                let anchor = obs.wheel_angles[i];
                self.base.intrinsic.mu[i] =
                    self.base.intrinsic.mu[i].clamp(anchor - lim, anchor + lim);
            }
            for (j, (lv, d)) in self.arm_levels.iter_mut().zip(&arm_deltas).enumerate() {
                apply_delta(lv, d, dt_sub);
                if let Some(limits) = &self.joint_belief_limits {
                    let (lo, hi) = limits[j];
                    lv.intrinsic.mu[0] = lv.intrinsic.mu[0].clamp(lo, hi);
                }
                // Project the quaternion slots back onto the unit sphere. Raw
                // belief flow can otherwise absorb chain stress by deflating
                // quaternion norms (rotations scale child translations by
                // ‖q‖²), hallucinating reach without moving any joint.
                let n = (lv.extrinsic.mu[3] * lv.extrinsic.mu[3]
                    + lv.extrinsic.mu[4] * lv.extrinsic.mu[4]
                    + lv.extrinsic.mu[5] * lv.extrinsic.mu[5]
                    + lv.extrinsic.mu[6] * lv.extrinsic.mu[6])
                    .sqrt();
                if n > 1e-9 {
                    for c in 3..7 {
                        lv.extrinsic.mu[c] /= n;
                    }
                }
            }
        }

        // Integrate and clamp actions.
        for i in 0..2 {
            self.actions.wheel_rates[i] = (self.actions.wheel_rates[i] + da_wheels[i] * dt)
                .clamp(-self.config.wheel_rate_limit, self.config.wheel_rate_limit);
        }
        for j in 0..self.actions.joint_rates.len() {
            self.actions.joint_rates[j] = (self.actions.joint_rates[j] + da_joints[j] * dt)
                .clamp(-self.config.joint_rate_limit, self.config.joint_rate_limit);
        }

        // Next tick's odometry constants anchor to this tick's observations:
        // the prediction then measures the belief's goal-ward lead against
        // reality, which is what sustains wheel drive toward base goals.
        self.prev_base_pose = obs.base_pose;
        self.prev_wheels = obs.wheel_angles;

        // Divergence guard, reporting the offending level.
        if !self.base.intrinsic.is_finite() || !self.base.extrinsic.is_finite() {
            return Err(ControllerError::NumericalDivergence { level: 0 });
        }
        for (j, lv) in self.arm_levels.iter().enumerate() {
            if !lv.intrinsic.is_finite() || !lv.extrinsic.is_finite() {
                return Err(ControllerError::NumericalDivergence { level: 1 + j });
            }
        }

        let (v, omega) = wheel_velocities(
            self.actions.wheel_rates[0] * dt,
            self.actions.wheel_rates[1] * dt,
            &BaseGeometry { dt, ..self.geom },
        );
        Ok(ActionCommand {
            base_v: v,
            base_omega: omega,
            joint_rates: self.actions.joint_rates.clone(),
            gripper,
        })
    }

    /// Per-level quadratic free-energy terms for the given observations.
    pub fn free_energy_breakdown(&self, obs: &Observations) -> Result<Vec<LevelEnergy>, ControllerError> {
        self.check_shapes(obs)?;
        let errors = self.all_errors(obs);
        let mut out = Vec::with_capacity(errors.len());
        let half = 0.5;
        for (idx, err) in errors.iter().enumerate() {
            let pi = if idx == 0 { self.base.precisions } else { self.arm_levels[idx - 1].precisions };
            out.push(LevelEnergy {
                level: idx,
                proprioceptive: half * pi.pi_p * err.eps_p.norm_squared(),
                visual: half * pi.pi_v * err.eps_v.norm_squared(),
                extrinsic: half * pi.pi_e * err.eps_e.norm_squared(),
                dyn_intrinsic: half * pi.pi_mu_i * err.eps_mu_i.norm_squared(),
                dyn_extrinsic: half * pi.pi_mu_e * err.eps_mu_e.norm_squared(),
            });
        }
        Ok(out)
    }

    pub fn total_free_energy(&self, obs: &Observations) -> Result<f64, ControllerError> {
        Ok(self.free_energy_breakdown(obs)?.iter().map(|e| e.total()).sum())
    }

    /// End-effector position according to the current extrinsic beliefs.
    pub fn believed_ee_position(&self) -> Vector3<f64> {
        let mu = &self.arm_levels[self.ee_level()].extrinsic.mu;
        Vector3::new(mu[0], mu[1], mu[2])
    }

    pub fn clear_goals(&mut self) {
        self.base.goals.clear();
        self.base.repulsors.clear();
        for lv in &mut self.arm_levels {
            lv.goals.clear();
            lv.repulsors.clear();
        }
    }

    pub fn set_base_goals(&mut self, goals: Vec<GoalSpec>) {
        self.base.goals = goals;
    }

    pub fn set_arm_level_goals(&mut self, level: usize, goals: Vec<GoalSpec>) {
        self.arm_levels[level].goals = goals;
    }

    pub fn push_arm_level_goal(&mut self, level: usize, goal: GoalSpec) {
        self.arm_levels[level].goals.push(goal);
    }

    pub fn set_arm_level_repulsors(&mut self, level: usize, repulsors: Vec<RepulsorSpec>) {
        self.arm_levels[level].repulsors = repulsors;
    }

    pub fn set_base_repulsors(&mut self, repulsors: Vec<RepulsorSpec>) {
        self.base.repulsors = repulsors;
    }
}

fn apply_delta(level: &mut LevelState, d: &LevelDelta, dt: f64) {
    level.intrinsic.mu += &d.d_mu_i * dt;
    level.intrinsic.mu_prime += &d.d_mu_i_prime * dt;
    level.extrinsic.mu += &d.d_mu_e * dt;
    level.extrinsic.mu_prime += &d.d_mu_e_prime * dt;
}

/// Planar pose lifted to the 7-vector layout: `(x, y, 0)` with a yaw
/// rotation.
pub fn lift_planar(x: f64, y: f64, theta: f64) -> Vec7 {
    let (s, c) = (theta / 2.0).sin_cos();
    Vec7::from_column_slice(&[x, y, 0.0, c, 0.0, 0.0, s])
}

/// ∂ lift_planar / ∂(x, y, θ), rows = planar inputs, columns = pose
/// components.
pub fn lift_planar_jacobian(theta: f64) -> SMatrix<f64, 3, 7> {
    let (s, c) = (theta / 2.0).sin_cos();
    let mut j = SMatrix::<f64, 3, 7>::zeros();
    j[(0, 0)] = 1.0;
    j[(1, 1)] = 1.0;
    j[(2, 3)] = -0.5 * s;
    j[(2, 6)] = 0.5 * c;
    j
}

/// Observations that exactly match a model's current beliefs; useful for
/// constructing zero-error fixed points.
pub fn observations_from_beliefs(model: &WholeBodyModel) -> Observations {
    let n = model.arm_levels.len();
    let mut link_positions = Vec::with_capacity(n);
    for lv in &model.arm_levels {
        link_positions.push(Vector3::new(lv.extrinsic.mu[0], lv.extrinsic.mu[1], lv.extrinsic.mu[2]));
    }
    Observations {
        wheel_angles: Vector2::new(model.base.intrinsic.mu[0], model.base.intrinsic.mu[1]),
        wheel_rates: Vector2::new(model.base.intrinsic.mu_prime[0], model.base.intrinsic.mu_prime[1]),
        base_pose: Vector3::new(
            model.base.extrinsic.mu[0],
            model.base.extrinsic.mu[1],
            model.base.extrinsic.mu[2],
        ),
        joint_angles: DVector::from_iterator(n, model.arm_levels.iter().map(|l| l.intrinsic.mu[0])),
        joint_rates: DVector::from_iterator(n, model.arm_levels.iter().map(|l| l.intrinsic.mu_prime[0])),
        link_positions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, UnitQuaternion};
    use approx::assert_relative_eq;

    fn small_chain(n: usize) -> KinematicChain {
        let links = (0..n)
            .map(|i| DHLink::new(0.1 * i as f64, if i % 2 == 0 { 0.4 } else { -0.3 }, 0.3, 0.05, true))
            .collect();
        KinematicChain::new(links, Pose::new(Vector3::new(0.1, 0.0, 0.3), UnitQuaternion::IDENTITY))
            .unwrap()
    }

    fn model(n: usize) -> WholeBodyModel {
        WholeBodyModel::new(small_chain(n), BaseGeometry::default(), ControllerConfig::default())
    }

    #[test]
    fn zero_error_fixed_point() {
        let mut m = model(3);
        let obs = observations_from_beliefs(&m);
        // Align so extrinsic beliefs chain consistently.
        m.align_to_observations(&obs).unwrap();
        let obs = observations_from_beliefs(&m);
        let before = m.clone();
        let cmd = m.step(&obs, 0.0).unwrap();
        assert_relative_eq!(cmd.base_v, 0.0, epsilon = 1e-12);
        assert_relative_eq!(cmd.base_omega, 0.0, epsilon = 1e-12);
        assert!(cmd.joint_rates.iter().all(|v| v.abs() < 1e-12));
        for (a, b) in before.arm_levels.iter().zip(&m.arm_levels) {
            assert_relative_eq!((&a.intrinsic.mu - &b.intrinsic.mu).norm(), 0.0, epsilon = 1e-12);
            assert_relative_eq!((&a.extrinsic.mu - &b.extrinsic.mu).norm(), 0.0, epsilon = 1e-12);
        }
        assert!(m.total_free_energy(&obs).unwrap() < 1e-18);
    }

    #[test]
    fn proprioceptive_offset_lands_in_one_entry() {
        let mut m = model(3);
        let obs = observations_from_beliefs(&m);
        m.align_to_observations(&obs).unwrap();
        let mut obs = observations_from_beliefs(&m);
        obs.joint_angles[1] += 0.25;
        let e = m.prediction_errors(LevelId::Arm(1), &obs).unwrap();
        assert_relative_eq!(e.eps_p[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(e.eps_p[1], 0.0, epsilon = 1e-12);
        let e0 = m.prediction_errors(LevelId::Arm(0), &obs).unwrap();
        assert_relative_eq!(e0.eps_p.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn top_level_update_ignores_levels_above() {
        // The top arm level has no from-above pull: its extrinsic update must
        // not change when a goal perturbs what would be "above" state.
        let mut m = model(3);
        let obs = observations_from_beliefs(&m);
        m.align_to_observations(&obs).unwrap();
        let obs = observations_from_beliefs(&m);
        let top = m.ee_level();
        let (_, _, d_e_before, _) = m.update_level(LevelId::Arm(top), &obs).unwrap();
        // Perturb a *lower* level's belief: the top level's extrinsic update
        // changes only through its own error; perturbing level 0's extrinsic
        // changes level 1's parent, not the top level's own terms directly.
        // Conversely, the top level must have no term referencing a level
        // above, which we check by asserting its delta only involves its own
        // error set: reconstruct it manually.
        let errs = m.prediction_errors(LevelId::Arm(top), &obs).unwrap();
        let pi = m.arm_levels[top].precisions;
        let mut expect = m.arm_levels[top].extrinsic.mu_prime.clone();
        expect -= pi.pi_e * &errs.eps_e;
        expect += pi.pi_v * &errs.eps_v;
        // dynamics term is zero here (no goals, mu_prime = 0)
        assert_relative_eq!((&d_e_before - &expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kappa_arm_zero_reduces_to_standalone_base() {
        let mut m = model(4);
        let obs = observations_from_beliefs(&m);
        m.align_to_observations(&obs).unwrap();
        // Perturb arm beliefs so the arm error is nonzero.
        m.arm_levels[0].extrinsic.mu[0] += 0.3;
        m.base.extrinsic.mu[1] += 0.05;
        let obs = observations_from_beliefs(&m);

        let mut coupled = m.clone();
        coupled.config.kappa_arm = 0.7;
        let mut standalone = m.clone();
        standalone.config.kappa_arm = 0.0;
        standalone.config.kappa_base = 1.0;

        let (di_c, ..) = coupled.update_level(LevelId::Base, &obs).unwrap();
        let (di_s, ..) = standalone.update_level(LevelId::Base, &obs).unwrap();
        // Arm error present: the two must differ.
        assert!((&di_c - &di_s).norm() > 1e-9);

        // And with kappa_arm = 0 the result is bit-identical to a model that
        // never had coupling configured.
        let mut zero = m.clone();
        zero.config.kappa_arm = 0.0;
        let (di_z, dj_z, de_z, dep_z) = zero.update_level(LevelId::Base, &obs).unwrap();
        assert_eq!(di_s, di_z);
        let (_, dj_s, de_s, dep_s) = standalone.update_level(LevelId::Base, &obs).unwrap();
        assert_eq!(dj_s, dj_z);
        assert_eq!(de_s, de_z);
        assert_eq!(dep_s, dep_z);
    }

    #[test]
    fn zero_precision_removes_term() {
        let mut m = model(3);
        let obs = observations_from_beliefs(&m);
        m.align_to_observations(&obs).unwrap();
        let mut obs = observations_from_beliefs(&m);
        obs.link_positions[2][0] += 0.2; // visual offset on the top level

        let mut no_vision = m.clone();
        for lv in &mut no_vision.arm_levels {
            lv.precisions.pi_v = 0.0;
        }
        let (_, _, d_e, _) = no_vision.update_level(LevelId::Arm(2), &obs).unwrap();
        // With pi_v = 0 and everything else consistent, the extrinsic delta
        // is exactly zero despite the visual offset.
        assert_relative_eq!(d_e.norm(), 0.0, epsilon = 1e-12);

        let (_, _, d_e_v, _) = m.update_level(LevelId::Arm(2), &obs).unwrap();
        assert!(d_e_v.norm() > 1e-6);
    }

    #[test]
    fn action_sign_drives_joint_toward_belief() {
        let mut m = model(3);
        let obs = observations_from_beliefs(&m);
        m.align_to_observations(&obs).unwrap();
        // Belief ahead of observation on joint 1.
        m.arm_levels[1].intrinsic.mu[0] += 0.2;
        let obs = observations_from_beliefs_with_joint(&m, 1, -0.2);
        let errors = m.all_errors(&obs);
        let (_, da) = m.action_update(&errors[0], &errors[1..]);
        assert!(da[1] > 0.0, "action must drive joint toward the belief, got {}", da[1]);
        assert_relative_eq!(da[0], 0.0, epsilon = 1e-12);
    }

    /// Observations matching beliefs except joint `j` offset by `delta`.
    fn observations_from_beliefs_with_joint(m: &WholeBodyModel, j: usize, delta: f64) -> Observations {
        let mut obs = observations_from_beliefs(m);
        obs.joint_angles[j] += delta;
        obs
    }

    #[test]
    fn divergence_reports_level() {
        let mut m = model(2);
        // Single substep and no coupling so the poison cannot spread to other
        // levels before the post-tick check attributes it.
        m.config.belief_substeps = 1;
        m.config.kappa_arm = 0.0;
        let obs = observations_from_beliefs(&m);
        m.align_to_observations(&obs).unwrap();
        let obs = observations_from_beliefs(&m);
        // Dynamics errors are level-private, so a poisoned intrinsic velocity
        // implicates exactly its own level.
        m.arm_levels[1].intrinsic.mu_prime[0] = f64::NAN;
        match m.step(&obs, 0.0) {
            Err(ControllerError::NumericalDivergence { level }) => assert_eq!(level, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = model(3);
        let mut obs = observations_from_beliefs(&m);
        obs.joint_angles = DVector::zeros(2);
        assert!(matches!(
            m.prediction_errors(LevelId::Base, &obs),
            Err(ControllerError::ModelShape(_))
        ));
    }
}
