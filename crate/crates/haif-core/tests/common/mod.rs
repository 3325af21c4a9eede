//! Shared oracles for the integration suites: a homogeneous-matrix forward
//! kinematics path (independent of the quaternion implementation) and central
//! finite differences.

#![allow(dead_code)]

use haif_core::geometry::DHLink;
use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, Vector3};
use rand::Rng;

/// DH transform of one link as a homogeneous isometry, built from rotation
/// matrices only.
pub fn dh_isometry(link: &DHLink) -> Isometry3<f64> {
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), link.theta)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), link.alpha);
    let t = Vector3::new(
        link.l * link.theta.cos(),
        link.l * link.theta.sin(),
        link.d,
    );
    Isometry3::from_parts(Translation3::from(t), rot.into())
}

/// Accumulated link isometries for a chain starting at the identity.
pub fn matrix_forward(links: &[DHLink]) -> Vec<Isometry3<f64>> {
    let mut out = Vec::with_capacity(links.len());
    let mut acc = Isometry3::identity();
    for link in links {
        acc *= dh_isometry(link);
        out.push(acc);
    }
    out
}

/// Quaternion distance up to sign between `[w,x,y,z]` components.
pub fn quat_dist_up_to_sign(a: [f64; 4], b: [f64; 4]) -> f64 {
    let d1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x + y).powi(2)).sum();
    d1.min(d2).sqrt()
}

/// Rotation matrix of a nalgebra isometry.
pub fn rotation_of(iso: &Isometry3<f64>) -> Matrix3<f64> {
    iso.rotation.to_rotation_matrix().into_inner()
}

pub fn random_link<R: Rng>(rng: &mut R) -> DHLink {
    DHLink::new(
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(0.0..0.6),
        rng.gen_range(-0.3..0.3),
        true,
    )
}

pub fn random_chain<R: Rng>(rng: &mut R, n: usize) -> Vec<DHLink> {
    (0..n).map(|_| random_link(rng)).collect()
}

/// Central finite-difference derivative of `f` at `x` in coordinate `i`.
pub fn central_diff<F>(f: F, x: &[f64], i: usize, h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    let fp = f(&xp);
    let fm = f(&xm);
    fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// Asserts `got` against `want` with relative tolerance `rel` and absolute
/// floor `abs`.
pub fn assert_close(got: f64, want: f64, rel: f64, abs: f64, what: &str) {
    let err = (got - want).abs();
    let scale = want.abs().max(got.abs());
    assert!(
        err <= abs + rel * scale,
        "{what}: got {got}, want {want}, err {err} (rel {rel}, abs {abs})"
    );
}
