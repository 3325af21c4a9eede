//! Goal attractors and repulsors: the dynamics functions shaping belief flow.
//!
//! An attractor contributes `κ_a ((N μ_s + n*) − μ_s)` on its target slice; a
//! repulsor contributes, inside its activation radius `γ`,
//!
//! ```text
//! joint limit:  k_r ζ (1/γ − 1/‖e‖)                 e = μ! − μ   (scalar)
//! obstacle:     k_r (1/γ − 1/‖e‖) e / ‖e‖³          e = μ!_pos − μ_pos
//! ```
//!
//! and exactly zero outside `γ`. Contributions from all goals and repulsors
//! of a level sum into one dynamics vector `f` per belief field, with the
//! Jacobian `∂f` stored input-dim × output-dim so the update term `∂f^T π ε`
//! is `jf * (π ε)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;

/// Repulsive fields saturate below this distance so near-contact states stay
/// numerically bounded.
pub const REPULSOR_FLOOR: f64 = 0.04;

/// Which belief vector of a level a goal or repulsor addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeliefField {
    Intrinsic,
    Extrinsic,
}

/// A linear attractor toward `N μ + n*` on a slice of a belief vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub field: BeliefField,
    /// First component of the addressed slice.
    pub start: usize,
    /// Static offset; slice length is `n_star.len()`.
    pub n_star: DVector<f64>,
    /// Optional linear map on the slice (defaults to the zero map, giving a
    /// static attractor at `n_star`).
    pub n_matrix: Option<DMatrix<f64>>,
    /// Attractor gain, 1/s.
    pub kappa: f64,
    /// Components treated as angles (errors wrapped to (−π, π]).
    pub angular: Vec<bool>,
    /// Slice holds quaternion components; the target sign is aligned to the
    /// current belief before differencing.
    pub quat_aligned: bool,
}

impl GoalSpec {
    /// Static attractor at `target` on `[start, start+len)` of the chosen
    /// field, no angular wrapping.
    pub fn attractor(field: BeliefField, start: usize, target: DVector<f64>, kappa: f64) -> Self {
        let n = target.len();
        Self {
            field,
            start,
            n_star: target,
            n_matrix: None,
            kappa,
            angular: vec![false; n],
            quat_aligned: false,
        }
    }

    /// Planar base-pose attractor `(x*, y*, θ*)`; the heading error is
    /// computed on the circle.
    pub fn base_pose(x: f64, y: f64, theta: f64, kappa: f64) -> Self {
        Self {
            field: BeliefField::Extrinsic,
            start: 0,
            n_star: DVector::from_vec(vec![x, y, theta]),
            n_matrix: None,
            kappa,
            angular: vec![false, false, true],
            quat_aligned: false,
        }
    }

    /// Joint-angle attractor on an arm level's intrinsic belief.
    pub fn joint(theta_star: f64, kappa: f64) -> Self {
        Self::attractor(BeliefField::Intrinsic, 0, DVector::from_vec(vec![theta_star]), kappa)
    }

    /// End-effector (or any arm level) position attractor.
    pub fn position(target: nalgebra::Vector3<f64>, kappa: f64) -> Self {
        Self::attractor(
            BeliefField::Extrinsic,
            0,
            DVector::from_vec(vec![target.x, target.y, target.z]),
            kappa,
        )
    }

    /// Full pose attractor `[x, y, z, qw, qx, qy, qz]` with sign-aligned
    /// quaternion error.
    pub fn pose(target: [f64; 7], kappa: f64) -> Self {
        Self {
            field: BeliefField::Extrinsic,
            start: 0,
            n_star: DVector::from_column_slice(&target),
            n_matrix: None,
            kappa,
            angular: vec![false; 7],
            quat_aligned: true,
        }
    }
}

/// Repulsor flavor: joint-limit (scalar, signed) or obstacle (positional).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RepulsorMode {
    /// ζ is −1 for a lower limit, +1 for an upper limit.
    JointLimit { zeta: f64 },
    Obstacle,
}

/// A repulsive state `μ!` with activation radius `γ` and gain `k_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepulsorSpec {
    pub mode: RepulsorMode,
    /// Joint-limit value (len 1) or obstacle position (len 2 planar / 3).
    pub mu_bang: DVector<f64>,
    pub gamma: f64,
    pub k_r: f64,
}

impl RepulsorSpec {
    pub fn joint_limit(limit: f64, zeta: f64, gamma: f64, k_r: f64) -> Self {
        debug_assert!(zeta == -1.0 || zeta == 1.0);
        Self {
            mode: RepulsorMode::JointLimit { zeta },
            mu_bang: DVector::from_vec(vec![limit]),
            gamma,
            k_r,
        }
    }

    pub fn obstacle(position: DVector<f64>, gamma: f64, k_r: f64) -> Self {
        Self { mode: RepulsorMode::Obstacle, mu_bang: position, gamma, k_r }
    }
}

/// Sum of goal and repulsor contributions on a belief vector, plus the
/// Jacobian `∂f` (input × output). Joint-limit repulsors act on component 0
/// of intrinsic beliefs; obstacle repulsors on the leading position
/// components of extrinsic beliefs.
pub fn dynamics_function(
    mu: &DVector<f64>,
    field: BeliefField,
    goals: &[GoalSpec],
    repulsors: &[RepulsorSpec],
) -> (DVector<f64>, DMatrix<f64>) {
    let dim = mu.len();
    let mut f = DVector::zeros(dim);
    let mut jf = DMatrix::zeros(dim, dim);

    for goal in goals.iter().filter(|g| g.field == field) {
        let len = goal.n_star.len();
        assert!(
            goal.start + len <= dim,
            "goal slice [{}, {}) exceeds belief dim {}",
            goal.start,
            goal.start + len,
            dim
        );
        let slice = mu.rows(goal.start, len).into_owned();
        let mut target = match &goal.n_matrix {
            Some(n) => n * &slice + &goal.n_star,
            None => goal.n_star.clone(),
        };
        if goal.quat_aligned && len == 7 {
            // Flip the quaternion part of the target onto the belief's
            // hemisphere so the attractor never drags across the double cover.
            let dot: f64 = (3..7).map(|i| target[i] * slice[i]).sum();
            if dot < 0.0 {
                for i in 3..7 {
                    target[i] = -target[i];
                }
            }
        }
        for c in 0..len {
            let mut err = target[c] - slice[c];
            if goal.angular[c] {
                err = wrap_angle(err);
            }
            f[goal.start + c] += goal.kappa * err;
        }
        // ∂f on the slice: κ (Nᵀ − I).
        for r in 0..len {
            for c in 0..len {
                let n_rc = goal.n_matrix.as_ref().map_or(0.0, |n| n[(c, r)]);
                let delta = if r == c { 1.0 } else { 0.0 };
                jf[(goal.start + r, goal.start + c)] += goal.kappa * (n_rc - delta);
            }
        }
    }

    for rep in repulsors {
        match (&rep.mode, field) {
            (RepulsorMode::JointLimit { zeta }, BeliefField::Intrinsic) => {
                let e = rep.mu_bang[0] - mu[0];
                // Physical joints approach a limit from inside, where the
                // field activates within γ as printed. Belief flow can be
                // pushed past the limit itself; the activation is one-sided
                // so such out-of-band beliefs stay repelled instead of
                // escaping the field.
                let active = if *zeta > 0.0 {
                    mu[0] >= rep.mu_bang[0] - rep.gamma
                } else {
                    mu[0] <= rep.mu_bang[0] + rep.gamma
                };
                if active {
                    let norm = e.abs().max(REPULSOR_FLOOR);
                    f[0] += rep.k_r * zeta * (1.0 / rep.gamma - 1.0 / norm);
                    if e.abs() > REPULSOR_FLOOR {
                        // d/dμ [−1/|e|] with e = μ! − μ: −sign(e)/e².
                        jf[(0, 0)] += -rep.k_r * zeta * e.signum() / (e * e);
                    }
                }
            }
            (RepulsorMode::Obstacle, BeliefField::Extrinsic) => {
                let n = rep.mu_bang.len();
                let e = rep.mu_bang.clone() - mu.rows(0, n).into_owned();
                let rho_true = e.norm();
                // Distance floor keeps the 1/ρ³ field bounded near contact.
                let rho = rho_true.max(REPULSOR_FLOOR);
                if rho_true <= rep.gamma && rho_true > 1e-12 {
                    let scale = rep.k_r * (1.0 / rep.gamma - 1.0 / rho) / rho.powi(3);
                    for c in 0..n {
                        f[c] += scale * e[c] / rho_true.max(1e-12) * rho;
                    }
                    if rho_true > REPULSOR_FLOOR {
                        // ∂f/∂μ with ∂e/∂μ = −I:
                        // k[(1/γ)(−Iρ⁻³ + 3ρ⁻⁵eeᵀ) − (−Iρ⁻⁴ + 4ρ⁻⁶eeᵀ)]
                        let g = 1.0 / rep.gamma;
                        for r in 0..n {
                            for c in 0..n {
                                let delta = if r == c { 1.0 } else { 0.0 };
                                let v = rep.k_r
                                    * (g * (-delta / rho.powi(3)
                                        + 3.0 * e[r] * e[c] / rho.powi(5))
                                        - (-delta / rho.powi(4)
                                            + 4.0 * e[r] * e[c] / rho.powi(6)));
                                jf[(r, c)] += v;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }

    (f, jf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn attractor_at_target_is_zero() {
        let mu = DVector::from_vec(vec![0.4, 0.0]);
        let goals = vec![GoalSpec::joint(0.4, 2.0)];
        let (f, _) = dynamics_function(&mu, BeliefField::Intrinsic, &goals, &[]);
        assert_relative_eq!(f[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scalar_attractor_value() {
        // μ = 0, n* = 1, N = 0, κ = 2 → f = 2.
        let mu = DVector::from_vec(vec![0.0]);
        let goals = vec![GoalSpec::attractor(
            BeliefField::Intrinsic,
            0,
            DVector::from_vec(vec![1.0]),
            2.0,
        )];
        let (f, jf) = dynamics_function(&mu, BeliefField::Intrinsic, &goals, &[]);
        assert_relative_eq!(f[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(jf[(0, 0)], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn lower_limit_pushes_up() {
        // Joint sits half an activation radius above its lower limit.
        let limit = -1.0;
        let gamma = 0.2;
        let mu = DVector::from_vec(vec![limit + 0.5 * gamma, 0.0]);
        let reps = vec![RepulsorSpec::joint_limit(limit, -1.0, gamma, 1.0)];
        let (f, _) = dynamics_function(&mu, BeliefField::Intrinsic, &[], &reps);
        assert!(f[0] > 0.0, "lower-limit repulsor must push away, got {}", f[0]);
    }

    #[test]
    fn upper_limit_pushes_down() {
        let limit = 1.0;
        let gamma = 0.2;
        let mu = DVector::from_vec(vec![limit - 0.5 * gamma, 0.0]);
        let reps = vec![RepulsorSpec::joint_limit(limit, 1.0, gamma, 1.0)];
        let (f, _) = dynamics_function(&mu, BeliefField::Intrinsic, &[], &reps);
        assert!(f[0] < 0.0, "upper-limit repulsor must push down, got {}", f[0]);
    }

    #[test]
    fn obstacle_pushes_away() {
        let gamma = 0.4;
        let obstacle = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        // Link half a radius from the obstacle, offset along −x.
        let mu = DVector::from_vec(vec![1.0 - 0.5 * gamma, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let reps = vec![RepulsorSpec::obstacle(obstacle, gamma, 1.0)];
        let (f, _) = dynamics_function(&mu, BeliefField::Extrinsic, &[], &reps);
        assert!(f[0] < 0.0, "repulsor must push along μ − μ!, got {}", f[0]);
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn repulsors_inactive_outside_gamma_bit_exact() {
        let gamma = 0.3;
        let mu = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let goals = vec![GoalSpec::position(nalgebra::Vector3::new(0.5, 0.2, 0.1), 1.5)];
        let far = vec![RepulsorSpec::obstacle(DVector::from_vec(vec![5.0, 5.0, 5.0]), gamma, 2.0)];
        let (f1, j1) = dynamics_function(&mu, BeliefField::Extrinsic, &goals, &far);
        let (f2, j2) = dynamics_function(&mu, BeliefField::Extrinsic, &goals, &[]);
        assert_eq!(f1, f2);
        assert_eq!(j1, j2);
    }

    #[test]
    fn dynamics_jacobian_matches_finite_differences() {
        let goals = vec![GoalSpec::position(nalgebra::Vector3::new(0.3, -0.2, 0.5), 1.7)];
        let reps = vec![RepulsorSpec::obstacle(DVector::from_vec(vec![0.15, 0.05, 0.3]), 0.5, 0.8)];
        let mu = DVector::from_vec(vec![0.1, 0.0, 0.25, 1.0, 0.0, 0.0, 0.0]);
        let (_, jf) = dynamics_function(&mu, BeliefField::Extrinsic, &goals, &reps);
        let h = 1e-7;
        for i in 0..7 {
            let mut p = mu.clone();
            let mut m = mu.clone();
            p[i] += h;
            m[i] -= h;
            let (fp, _) = dynamics_function(&p, BeliefField::Extrinsic, &goals, &reps);
            let (fm, _) = dynamics_function(&m, BeliefField::Extrinsic, &goals, &reps);
            for c in 0..7 {
                let fd = (fp[c] - fm[c]) / (2.0 * h);
                assert_relative_eq!(jf[(i, c)], fd, epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }
}
