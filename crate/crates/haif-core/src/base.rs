//! Differential-drive kinematics: the wheel-increment generative model, its
//! gradients, and velocity relations.
//!
//! With wheel increments `Δφ_R, Δφ_L` between timesteps, wheel radius `r`,
//! track width `l` and step `δt`:
//!
//! ```text
//! V = r (Δφ_R + Δφ_L) / (2 δt)        ω = r (Δφ_R − Δφ_L) / (l δt)
//! x' = x + (r/2)(Δφ_R + Δφ_L) cos θ
//! y' = y + (r/2)(Δφ_R + Δφ_L) sin θ
//! θ' = θ + (r/l)(Δφ_R − Δφ_L)
//! ```
//!
//! Headings are wrapped to (−π, π] after every update, and angular errors are
//! taken as shortest signed differences on the circle.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;

/// Cumulative wheel rotations, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseIntrinsic {
    pub phi_r: f64,
    pub phi_l: f64,
}

/// Planar base pose in the world frame; `theta` wrapped to (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseExtrinsic {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl BaseExtrinsic {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Wheel radius, track width and integration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseGeometry {
    /// Wheel radius, meters.
    pub r: f64,
    /// Distance between wheels, meters.
    pub l_track: f64,
    /// Integration step, seconds.
    pub dt: f64,
}

impl Default for BaseGeometry {
    fn default() -> Self {
        Self { r: 0.1, l_track: 0.5, dt: 0.05 }
    }
}

impl BaseGeometry {
    pub fn new(r: f64, l_track: f64, dt: f64) -> Self {
        assert!(r > 0.0 && l_track > 0.0 && dt > 0.0, "base geometry must be positive");
        Self { r, l_track, dt }
    }
}

/// Forward and angular velocity from wheel increments over one step.
pub fn wheel_velocities(dphi_r: f64, dphi_l: f64, geom: &BaseGeometry) -> (f64, f64) {
    let v = geom.r * (dphi_r + dphi_l) / (2.0 * geom.dt);
    let omega = geom.r * (dphi_r - dphi_l) / (geom.l_track * geom.dt);
    (v, omega)
}

/// Wheel rates (rad/s) realizing forward velocity `v` and angular velocity
/// `omega`; inverse of [`wheel_velocities`] scaled by `dt`.
pub fn wheel_rates_from_velocity(v: f64, omega: f64, geom: &BaseGeometry) -> (f64, f64) {
    let rate_r = (2.0 * v + omega * geom.l_track) / (2.0 * geom.r);
    let rate_l = (2.0 * v - omega * geom.l_track) / (2.0 * geom.r);
    (rate_r, rate_l)
}

/// One Euler update of the base pose from wheel increments.
pub fn base_ge(dphi: Vector2<f64>, prev: &BaseExtrinsic, geom: &BaseGeometry) -> BaseExtrinsic {
    let half_sum = 0.5 * geom.r * (dphi[0] + dphi[1]);
    let dtheta = geom.r / geom.l_track * (dphi[0] - dphi[1]);
    BaseExtrinsic::new(
        prev.x + half_sum * prev.theta.cos(),
        prev.y + half_sum * prev.theta.sin(),
        prev.theta + dtheta,
    )
}

/// ∂(base model)/∂(Δφ_R, Δφ_L): rows are the wheel increments, columns the
/// pose components (x, y, θ). Depends only on the previous heading.
pub fn grad_base_intrinsic(prev: &BaseExtrinsic, geom: &BaseGeometry) -> Matrix2x3<f64> {
    let (s, c) = prev.theta.sin_cos();
    let hr = 0.5 * geom.r;
    let k = geom.r / geom.l_track;
    Matrix2x3::new(hr * c, hr * s, k, hr * c, hr * s, -k)
}

/// Gradient of the base prediction with respect to the extrinsic belief.
///
/// The previous pose entering the model is a constant snapshot from the last
/// step, not the belief, so the prediction does not vary with the belief and
/// the gradient used in updates is the zero matrix.
pub fn grad_base_extrinsic(_prev: &BaseExtrinsic, _geom: &BaseGeometry) -> Matrix3<f64> {
    Matrix3::zeros()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn geom() -> BaseGeometry {
        BaseGeometry::new(0.1, 0.5, 0.1)
    }

    #[test]
    fn straight_motion_velocities() {
        let (v, w) = wheel_velocities(0.1, 0.1, &geom());
        assert_relative_eq!(v, 0.1, epsilon = 1e-12);
        assert_relative_eq!(w, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn spin_in_place_velocities() {
        let (v, w) = wheel_velocities(0.1, -0.1, &geom());
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
        assert_relative_eq!(w, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn mixed_increment_velocities() {
        let (v, w) = wheel_velocities(0.2, 0.1, &geom());
        assert_relative_eq!(v, 0.15, epsilon = 1e-12);
        assert_relative_eq!(w, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn wheel_rates_invert_velocities() {
        let g = geom();
        let (rr, rl) = wheel_rates_from_velocity(0.3, -0.7, &g);
        let (v, w) = wheel_velocities(rr * g.dt, rl * g.dt, &g);
        assert_relative_eq!(v, 0.3, epsilon = 1e-12);
        assert_relative_eq!(w, -0.7, epsilon = 1e-12);
    }

    #[test]
    fn forward_step() {
        let p = base_ge(Vector2::new(0.1, 0.1), &BaseExtrinsic::default(), &geom());
        assert_relative_eq!(p.x, 0.01, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.theta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_step() {
        let p = base_ge(Vector2::new(0.1, -0.1), &BaseExtrinsic::default(), &geom());
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.theta, 0.04, epsilon = 1e-12);
    }

    #[test]
    fn constant_curvature_arc_matches_closed_form() {
        // Exact unicycle arc: radius R = V/ω, after heading change Θ the pose
        // is (R sin Θ, R (1 − cos Θ), Θ).
        let g = geom();
        let d = Vector2::new(0.11, 0.09);
        let mut p = BaseExtrinsic::default();
        let n = 100;
        for _ in 0..n {
            p = base_ge(d, &p, &g);
        }
        let (v, w) = wheel_velocities(d[0], d[1], &g);
        let t_total = n as f64 * g.dt;
        let theta_total = w * t_total;
        let radius = v / w;
        let exact_x = radius * theta_total.sin();
        let exact_y = radius * (1.0 - theta_total.cos());
        let err = ((p.x - exact_x).powi(2) + (p.y - exact_y).powi(2)).sqrt();
        let arc_len = v * t_total;
        assert!(err / arc_len < 0.01, "arc deviation {err} over {arc_len}");
        assert_relative_eq!(p.theta, wrap_angle(theta_total), epsilon = 1e-9);
    }

    #[test]
    fn intrinsic_gradient_headings() {
        let g = geom();
        let j0 = grad_base_intrinsic(&BaseExtrinsic::default(), &g);
        assert_relative_eq!(j0[(0, 0)], 0.05, epsilon = 1e-12); // ∂x/∂Δφ_R = r/2
        assert_relative_eq!(j0[(0, 1)], 0.0, epsilon = 1e-12);

        let j90 = grad_base_intrinsic(
            &BaseExtrinsic::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            &g,
        );
        assert_relative_eq!(j90[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(j90[(0, 1)], 0.05, epsilon = 1e-12); // ∂y/∂Δφ_R = r/2
    }

    #[test]
    fn intrinsic_gradient_matches_finite_differences() {
        let g = geom();
        let h = 1e-7;
        for k in 0..20 {
            let theta = -3.0 + 0.3 * k as f64;
            let prev = BaseExtrinsic::new(0.4, -0.2, theta);
            let jac = grad_base_intrinsic(&prev, &g);
            let base_d = Vector2::new(0.03, -0.02);
            for wheel in 0..2 {
                let mut dp = base_d;
                let mut dm = base_d;
                dp[wheel] += h;
                dm[wheel] -= h;
                let fp = base_ge(dp, &prev, &g).as_vector();
                let fm = base_ge(dm, &prev, &g).as_vector();
                for c in 0..3 {
                    let fd = (fp[c] - fm[c]) / (2.0 * h);
                    assert_relative_eq!(jac[(wheel, c)], fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn mirrored_increments_mirror_trajectory() {
        let g = geom();
        let mut p1 = BaseExtrinsic::default();
        let mut p2 = BaseExtrinsic::default();
        for i in 0..50 {
            let a = 0.05 + 0.001 * i as f64;
            let b = 0.03 - 0.0005 * i as f64;
            p1 = base_ge(Vector2::new(a, b), &p1, &g);
            p2 = base_ge(Vector2::new(b, a), &p2, &g);
        }
        assert_relative_eq!(p1.x, p2.x, epsilon = 1e-9);
        assert_relative_eq!(p1.y, -p2.y, epsilon = 1e-9);
        assert_relative_eq!(p1.theta, -p2.theta, epsilon = 1e-9);
    }

    #[test]
    fn composition_is_pose_equivariant() {
        // Transforming the start pose transforms the end pose identically.
        let g = geom();
        let steps: Vec<Vector2<f64>> =
            (0..40).map(|i| Vector2::new(0.04 + 0.001 * i as f64, 0.05 - 0.002 * i as f64)).collect();

        let run = |start: BaseExtrinsic| {
            let mut p = start;
            for d in &steps {
                p = base_ge(*d, &p, &g);
            }
            p
        };

        let end0 = run(BaseExtrinsic::default());
        let shift = BaseExtrinsic::new(1.5, -0.7, 0.9);
        let end1 = run(shift);

        // Map end0 through the start transform.
        let (s, c) = shift.theta.sin_cos();
        let ex = shift.x + c * end0.x - s * end0.y;
        let ey = shift.y + s * end0.x + c * end0.y;
        assert_relative_eq!(end1.x, ex, epsilon = 1e-9);
        assert_relative_eq!(end1.y, ey, epsilon = 1e-9);
        assert_relative_eq!(wrap_angle(end1.theta - end0.theta - shift.theta), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn wheel_velocities_linear() {
        let g = geom();
        let (v1, w1) = wheel_velocities(0.07, -0.02, &g);
        let (v2, w2) = wheel_velocities(0.01, 0.05, &g);
        let (vs, ws) = wheel_velocities(0.08, 0.03, &g);
        assert_relative_eq!(v1 + v2, vs, epsilon = 1e-12);
        assert_relative_eq!(w1 + w2, ws, epsilon = 1e-12);
    }
}
