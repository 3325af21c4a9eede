//! Quaternion algebra, Denavit–Hartenberg link transforms, and the kinematic
//! chain map used as the generative model for arm levels.
//!
//! A link pose is `(t, q)` with `t` a translation in meters and `q` a unit
//! quaternion `(w, x, y, z)`. The chain map composes a previous link pose with
//! the local DH transform of the current link:
//!
//! ```text
//! t_out = t_prev + h(q_prev · [0 t_loc] · q_prev*)
//! q_out = q_prev · q_loc
//! ```
//!
//! where `·` is the Hamilton product and `h` takes the imaginary part. The
//! local DH transform has `t_loc = [l cosθ, l sinθ, d]` and
//! `q_loc = (cos(θ/2)cos(α/2), cos(θ/2)sin(α/2), sin(θ/2)sin(α/2), sin(θ/2)cos(α/2))`,
//! the quaternion of a rotation θ about z followed by α about x.
//!
//! Belief vectors treat pose components as free coordinates, so alongside the
//! unit-quaternion API there is a raw 7-vector path (`chain_step_raw`,
//! `grad_chain_*`) that evaluates the same polynomial map without any
//! normalization. The analytic Jacobians differentiate that raw map; all are
//! stored input-dim × output-dim and applied to error vectors as `J * e`.

use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pose components in a belief vector: `[x, y, z, qw, qx, qy, qz]`.
pub const POSE_DIM: usize = 7;

/// Errors from quaternion construction and composition.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid quaternion ({0}): components must be finite with non-negligible norm")]
    InvalidQuaternion(String),
    #[error("kinematic chain must have at least one link")]
    EmptyChain,
}

/// A unit quaternion `(w, x, y, z)`, kept normalized to 1e-9 of unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    /// Identity rotation.
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds from components, requiring unit norm within 1e-6, then
    /// renormalizing exactly.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GeometryError::InvalidQuaternion(format!(
                "({w}, {x}, {y}, {z})"
            )));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidQuaternion(format!(
                "norm {n} outside unit tolerance"
            )));
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    /// Builds from any finite components with non-negligible norm, normalizing.
    pub fn from_unnormalized(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GeometryError::InvalidQuaternion(format!(
                "({w}, {x}, {y}, {z})"
            )));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-12 {
            return Err(GeometryError::InvalidQuaternion("near-zero norm".into()));
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-12 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let u = axis / n;
        Self { w: c, x: s * u.x, y: s * u.y, z: s * u.z }
    }

    /// Rotation about the world z axis (planar heading).
    pub fn from_yaw(theta: f64) -> Self {
        let (s, c) = (theta / 2.0).sin_cos();
        Self { w: c, x: 0.0, y: 0.0, z: s }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Sign-canonical representative of the rotation: w ≥ 0, ties broken on
    /// the first nonzero imaginary component.
    pub fn canonicalized(&self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    /// Rotation angle to `other`, insensitive to quaternion sign.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let dot = (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z)
            .abs()
            .min(1.0);
        2.0 * dot.acos()
    }

    /// Equivalent 3×3 rotation matrix.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix_raw(&self.as_vector())
    }
}

/// Hamilton product of two unit quaternions, renormalized.
///
/// The raw product is returned without sign canonicalization, so e.g.
/// `k · k = (−1, 0, 0, 0)`.
pub fn hamilton_product(
    q1: &UnitQuaternion,
    q2: &UnitQuaternion,
) -> Result<UnitQuaternion, GeometryError> {
    let p = quat_mul_raw(&q1.as_vector(), &q2.as_vector());
    UnitQuaternion::from_unnormalized(p[0], p[1], p[2], p[3])
}

/// Rotates `t` by `q`: the imaginary part of `q · [0 t] · q*`.
pub fn rotate_vector(q: &UnitQuaternion, t: Vector3<f64>) -> Vector3<f64> {
    rotate_raw(&q.as_vector(), &t)
}

/// Hamilton product on raw 4-vectors `[w, x, y, z]`, no normalization.
pub fn quat_mul_raw(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Quadratic-form rotation of `v` by a raw quaternion `[w,x,y,z]`:
/// `(w² − u·u) v + 2 (u·v) u + 2 w (u × v)` with `u = (x, y, z)`.
///
/// Agrees with `rotate_vector` for unit quaternions and stays a polynomial in
/// the components, which is what the belief-space Jacobians differentiate.
pub fn rotate_raw(q: &Vector4<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    v * (w * w - u.dot(&u)) + u * (2.0 * u.dot(v)) + u.cross(v) * (2.0 * w)
}

/// 3×3 matrix of `rotate_raw(q, ·)`.
pub fn rotation_matrix_raw(q: &Vector4<f64>) -> Matrix3<f64> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    Matrix3::identity() * (w * w - u.dot(&u))
        + u * u.transpose() * 2.0
        + skew(&u) * (2.0 * w)
}

fn skew(u: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0)
}

/// ∂ rotate_raw(q, v) / ∂q, rows = quaternion components (w, x, y, z),
/// columns = output coordinates.
pub fn rotate_raw_jacobian_q(q: &Vector4<f64>, v: &Vector3<f64>) -> SMatrix<f64, 4, 3> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    let mut j = SMatrix::<f64, 4, 3>::zeros();
    let dw = v * (2.0 * w) + u.cross(v) * 2.0;
    for c in 0..3 {
        j[(0, c)] = dw[c];
    }
    for m in 0..3 {
        let mut e = Vector3::zeros();
        e[m] = 1.0;
        let dm = v * (-2.0 * u[m]) + u * (2.0 * v[m]) + e * (2.0 * u.dot(v)) + e.cross(v) * (2.0 * w);
        for c in 0..3 {
            j[(m + 1, c)] = dm[c];
        }
    }
    j
}

/// ∂(a · b) / ∂a for the raw Hamilton product, rows = components of `a`,
/// columns = components of the product.
pub fn quat_mul_jacobian_left(b: &Vector4<f64>) -> SMatrix<f64, 4, 4> {
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    SMatrix::<f64, 4, 4>::from_rows(&[
        [bw, bx, by, bz].into(),
        [-bx, bw, -bz, by].into(),
        [-by, bz, bw, -bx].into(),
        [-bz, -by, bx, bw].into(),
    ])
}

/// A 3D pose: translation plus unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: Vector3<f64>,
    pub q: UnitQuaternion,
}

impl Pose {
    pub const IDENTITY: Self = Self {
        t: Vector3::new(0.0, 0.0, 0.0),
        q: UnitQuaternion::IDENTITY,
    };

    pub fn new(t: Vector3<f64>, q: UnitQuaternion) -> Self {
        Self { t, q }
    }

    /// `self` then `other`: `(t1 + R1 t2, q1 · q2)`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let p = quat_mul_raw(&self.q.as_vector(), &other.q.as_vector());
        Pose {
            t: self.t + rotate_vector(&self.q, other.t),
            q: UnitQuaternion::from_unnormalized(p[0], p[1], p[2], p[3])
                .expect("composition of unit quaternions is unit")
                .canonicalized(),
        }
    }

    /// Raw belief-vector layout `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_vec7(&self) -> SMatrix<f64, 7, 1> {
        SMatrix::<f64, 7, 1>::from_column_slice(&[
            self.t.x, self.t.y, self.t.z, self.q.w, self.q.x, self.q.y, self.q.z,
        ])
    }

    /// Reads a pose from a raw 7-vector, normalizing the quaternion part.
    pub fn from_vec7(v: &SMatrix<f64, 7, 1>) -> Result<Self, GeometryError> {
        Ok(Self {
            t: Vector3::new(v[0], v[1], v[2]),
            q: UnitQuaternion::from_unnormalized(v[3], v[4], v[5], v[6])?,
        })
    }
}

/// Denavit–Hartenberg parameters of one link. `theta` and `l` are the
/// belief-backed entries when the link is actuated; `alpha` and `d` are
/// constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DHLink {
    /// Joint angle, radians.
    pub theta: f64,
    /// Twist about x, radians.
    pub alpha: f64,
    /// Link length along the rotated x axis, meters.
    pub l: f64,
    /// Offset along z, meters.
    pub d: f64,
    /// Whether `theta` is a controlled joint variable.
    pub actuated: bool,
}

impl DHLink {
    pub fn new(theta: f64, alpha: f64, l: f64, d: f64, actuated: bool) -> Self {
        Self { theta, alpha, l, d, actuated }
    }

    /// Same link with a different joint angle.
    pub fn with_theta(&self, theta: f64) -> Self {
        Self { theta, ..*self }
    }

    /// Local translation `[l cosθ, l sinθ, d]`.
    pub fn local_translation(&self) -> Vector3<f64> {
        Vector3::new(self.l * self.theta.cos(), self.l * self.theta.sin(), self.d)
    }

    /// Local rotation quaternion of θ about z composed with α about x.
    pub fn local_quaternion(&self) -> Vector4<f64> {
        let (st, ct) = (self.theta / 2.0).sin_cos();
        let (sa, ca) = (self.alpha / 2.0).sin_cos();
        Vector4::new(ct * ca, ct * sa, st * sa, st * ca)
    }
}

/// Local transform of one link as a pose.
pub fn dh_local_transform(link: &DHLink) -> Pose {
    let q = link.local_quaternion();
    Pose {
        t: link.local_translation(),
        q: UnitQuaternion::from_unnormalized(q[0], q[1], q[2], q[3])
            .expect("DH quaternion is unit by construction"),
    }
}

/// One step of the chain generative model: the current link pose given the
/// previous link pose. Output quaternion is sign-canonicalized.
pub fn chain_step(link: &DHLink, prev: &Pose) -> Pose {
    prev.compose(&dh_local_transform(link))
}

/// The same chain step on raw 7-vectors, with no normalization or sign fix.
/// This is the smooth map the analytic Jacobians differentiate.
pub fn chain_step_raw(link: &DHLink, prev: &SMatrix<f64, 7, 1>) -> SMatrix<f64, 7, 1> {
    compose_raw(prev, &link.local_translation(), &link.local_quaternion())
}

/// Raw pose composition: `first` followed by the local transform
/// `(t_loc, q_loc)`, all on unnormalized components.
pub fn compose_raw(
    first: &SMatrix<f64, 7, 1>,
    t_loc: &Vector3<f64>,
    q_loc: &Vector4<f64>,
) -> SMatrix<f64, 7, 1> {
    let t_prev = Vector3::new(first[0], first[1], first[2]);
    let q_prev = Vector4::new(first[3], first[4], first[5], first[6]);
    let t = t_prev + rotate_raw(&q_prev, t_loc);
    let q = quat_mul_raw(&q_prev, q_loc);
    SMatrix::<f64, 7, 1>::from_column_slice(&[t[0], t[1], t[2], q[0], q[1], q[2], q[3]])
}

/// ∂ compose_raw / ∂ first, rows = input pose components, columns = output
/// components.
pub fn grad_compose_first(
    first: &SMatrix<f64, 7, 1>,
    t_loc: &Vector3<f64>,
    q_loc: &Vector4<f64>,
) -> SMatrix<f64, 7, 7> {
    let q_prev = Vector4::new(first[3], first[4], first[5], first[6]);
    let mut j = SMatrix::<f64, 7, 7>::zeros();
    for i in 0..3 {
        j[(i, i)] = 1.0;
    }
    let jq = rotate_raw_jacobian_q(&q_prev, t_loc);
    for r in 0..4 {
        for c in 0..3 {
            j[(3 + r, c)] = jq[(r, c)];
        }
    }
    let jm = quat_mul_jacobian_left(q_loc);
    for r in 0..4 {
        for c in 0..4 {
            j[(3 + r, 3 + c)] = jm[(r, c)];
        }
    }
    j
}

/// ∂(chain step)/∂(θ, l): rows are the intrinsic variables, columns the seven
/// output pose components.
pub fn grad_chain_intrinsic(link: &DHLink, prev: &SMatrix<f64, 7, 1>) -> SMatrix<f64, 2, 7> {
    let q_prev = Vector4::new(prev[3], prev[4], prev[5], prev[6]);
    let (st, ct) = link.theta.sin_cos();

    let dt_dtheta = Vector3::new(-link.l * st, link.l * ct, 0.0);
    let dt_dl = Vector3::new(ct, st, 0.0);

    let (sh, chh) = (link.theta / 2.0).sin_cos();
    let (sa, ca) = (link.alpha / 2.0).sin_cos();
    let dq_loc_dtheta = Vector4::new(-sh * ca, -sh * sa, chh * sa, chh * ca) * 0.5;

    let dpos_dtheta = rotate_raw(&q_prev, &dt_dtheta);
    let dpos_dl = rotate_raw(&q_prev, &dt_dl);
    let dquat_dtheta = quat_mul_raw(&q_prev, &dq_loc_dtheta);

    let mut j = SMatrix::<f64, 2, 7>::zeros();
    for c in 0..3 {
        j[(0, c)] = dpos_dtheta[c];
        j[(1, c)] = dpos_dl[c];
    }
    for c in 0..4 {
        j[(0, 3 + c)] = dquat_dtheta[c];
    }
    j
}

/// ∂(chain step)/∂(previous pose): rows are the seven input pose components,
/// columns the seven output components.
pub fn grad_chain_extrinsic(link: &DHLink, prev: &SMatrix<f64, 7, 1>) -> SMatrix<f64, 7, 7> {
    grad_compose_first(prev, &link.local_translation(), &link.local_quaternion())
}

/// An ordered DH chain rooted at `base_pose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub links: Vec<DHLink>,
    pub base_pose: Pose,
}

impl KinematicChain {
    pub fn new(links: Vec<DHLink>, base_pose: Pose) -> Result<Self, GeometryError> {
        if links.is_empty() {
            return Err(GeometryError::EmptyChain);
        }
        Ok(Self { links, base_pose })
    }

    /// Number of actuated joints.
    pub fn dof(&self) -> usize {
        self.links.iter().filter(|l| l.actuated).count()
    }

    /// Poses of every link for the given joint values (added to each actuated
    /// link's `theta` offset). `joints.len()` must equal `dof()`.
    pub fn forward(&self, joints: &[f64]) -> Vec<Pose> {
        assert_eq!(joints.len(), self.dof(), "joint vector length mismatch");
        let mut poses = Vec::with_capacity(self.links.len());
        let mut prev = self.base_pose;
        let mut ji = 0;
        for link in &self.links {
            let eff = if link.actuated {
                let l = link.with_theta(link.theta + joints[ji]);
                ji += 1;
                l
            } else {
                *link
            };
            prev = chain_step(&eff, &prev);
            poses.push(prev);
        }
        poses
    }

    /// End-effector pose for the given joint values.
    pub fn end_effector(&self, joints: &[f64]) -> Pose {
        *self.forward(joints).last().expect("chain is nonempty")
    }
}

/// Shortest signed angular difference `a − b` wrapped to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Shortest signed difference between two angles, on the circle.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}
