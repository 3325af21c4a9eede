//! Streaming Gaussian-mixture world map: coordinate-ascent variational
//! inference over 6-D points (3-D position ⊕ 3-D color), with occupancy and
//! nearest-obstacle queries for navigation and repulsors.
//!
//! Each component holds a Normal–Inverse–Wishart posterior over its mean and
//! covariance (location `m`, scale matrix `Ψ`, concentration `κ`, degrees of
//! freedom `ν`), with a Dirichlet posterior over mixture weights. A batch
//! update runs CAVI sweeps against the pre-batch posterior as prior:
//!
//! ```text
//! E-step:  ln ρ_nk = E[ln π_k] + ½ E[ln|Λ_k|] − D/2 ln 2π
//!                    − ½ (D/κ_k + ν_k (x_n − m_k)ᵀ Ψ_k⁻¹ (x_n − m_k))
//! M-step:  α_k = α0_k + N_k          κ_k = κ0_k + N_k     ν_k = ν0_k + N_k
//!          m_k = (κ0_k m0_k + N_k x̄_k) / κ_k
//!          Ψ_k = Ψ0_k + Σ_n r_nk (x_n − x̄_k)(x_n − x̄_k)ᵀ
//!                + (κ0_k N_k / κ_k)(x̄_k − m0_k)(x̄_k − m0_k)ᵀ
//! ```
//!
//! No past data is retained: the update consumes the current parameters and
//! the batch only. Each full sweep is exact coordinate ascent, so the
//! variational lower bound is non-decreasing per sweep on a fixed batch.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::nav::{Cell, OccupancyGrid};

/// Point dimension: 3-D position plus 3-D color.
pub const POINT_DIM: usize = 6;

/// Normal–Inverse–Wishart parameters of one mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    /// Posterior location of the mean.
    pub mean: DVector<f64>,
    /// Scale matrix Ψ (symmetric positive-definite).
    pub scale: DMatrix<f64>,
    /// Mean concentration κ.
    pub concentration: f64,
    /// Degrees of freedom ν (> dim − 1).
    pub dof: f64,
}

impl MixtureComponent {
    /// Expected covariance E[Σ] = Ψ / (ν − D − 1), defined for ν > D + 1.
    pub fn expected_covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len() as f64;
        &self.scale / (self.dof - d - 1.0)
    }

    /// E[ln |Λ|] for the Wishart precision implied by (Ψ, ν).
    fn expected_logdet_precision(&self) -> f64 {
        let d = self.mean.len();
        let chol = self
            .scale
            .clone()
            .cholesky()
            .expect("scale matrix must stay positive-definite");
        let logdet_scale = 2.0 * (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        (0..d).map(|i| digamma((self.dof - i as f64) / 2.0)).sum::<f64>()
            + d as f64 * std::f64::consts::LN_2
            - logdet_scale
    }
}

/// Truncated Gaussian-mixture posterior over the mapped scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMap {
    pub components: Vec<MixtureComponent>,
    /// Dirichlet concentrations, one per component.
    pub dirichlet_alpha: DVector<f64>,
    /// Initial concentration, kept to measure how much data a component has
    /// absorbed.
    pub alpha0: f64,
    /// CAVI sweeps per batch update.
    pub sweeps: usize,
}

/// Configuration of the map prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Truncation: number of mixture components.
    pub components: usize,
    /// Room bounding box, position part, min corner.
    pub bounds_min: [f64; 3],
    /// Room bounding box, max corner.
    pub bounds_max: [f64; 3],
    /// Prior positional standard deviation, meters.
    pub position_sigma: f64,
    /// Prior color standard deviation.
    pub color_sigma: f64,
    /// Dirichlet prior concentration per component.
    pub alpha0: f64,
    /// Mean concentration prior κ0.
    pub kappa0: f64,
    /// CAVI sweeps per batch.
    pub sweeps: usize,
    /// Seed scattering the prior component locations over the room box.
    pub seed: u64,
    /// Minimum absorbed responsibility mass for a component to count in
    /// spatial queries.
    pub min_points: f64,
    /// Squared Mahalanobis threshold for occupancy ("2σ" → 4.0).
    pub mahalanobis_sq: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            components: 256,
            bounds_min: [-4.0, -3.0, 0.0],
            bounds_max: [4.0, 3.0, 2.0],
            position_sigma: 0.15,
            color_sigma: 0.25,
            alpha0: 0.5,
            kappa0: 0.05,
            sweeps: 3,
            seed: 0,
            min_points: 3.0,
            mahalanobis_sq: 4.0,
        }
    }
}

/// A spatial query hit: component position mean, covariance extent, distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleHit {
    pub position: Vector3<f64>,
    /// Largest positional standard deviation, meters.
    pub extent: f64,
    pub distance: f64,
}

impl MixtureMap {
    /// Fresh map: component locations scattered uniformly over the room box,
    /// broad covariance priors, symmetric Dirichlet.
    pub fn new(config: &MapConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = POINT_DIM;
        let nu0 = d as f64 + 2.0;
        // Ψ0 chosen so the prior expected covariance matches the configured
        // sigmas: E[Σ] = Ψ/(ν − D − 1).
        let mut scale0 = DMatrix::zeros(d, d);
        for i in 0..3 {
            scale0[(i, i)] = config.position_sigma.powi(2) * (nu0 - d as f64 - 1.0).max(1.0);
            scale0[(i + 3, i + 3)] = config.color_sigma.powi(2) * (nu0 - d as f64 - 1.0).max(1.0);
        }
        // ν0 = D + 2 makes (ν0 − D − 1) = 1.
        let components = (0..config.components)
            .map(|_| {
                let mut mean = DVector::zeros(d);
                for i in 0..3 {
                    mean[i] = rng.gen_range(config.bounds_min[i]..config.bounds_max[i]);
                }
                for i in 3..6 {
                    mean[i] = rng.gen_range(0.0..1.0);
                }
                MixtureComponent {
                    mean,
                    scale: scale0.clone(),
                    concentration: config.kappa0,
                    dof: nu0,
                }
            })
            .collect();
        Self {
            components,
            dirichlet_alpha: DVector::from_element(config.components, config.alpha0),
            alpha0: config.alpha0,
            sweeps: config.sweeps,
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Expected mixture weights E[π].
    pub fn expected_weights(&self) -> DVector<f64> {
        let total: f64 = self.dirichlet_alpha.iter().sum();
        &self.dirichlet_alpha / total
    }

    /// Responsibilities of `batch` under the current posterior: rows are
    /// points, columns components; each row sums to one.
    pub fn responsibilities(&self, batch: &[DVector<f64>]) -> DMatrix<f64> {
        let k = self.components.len();
        let n = batch.len();
        let d = POINT_DIM as f64;
        let alpha_total: f64 = self.dirichlet_alpha.iter().sum();
        let digamma_total = digamma(alpha_total);

        // Per-component cached quantities.
        let mut e_ln_pi = vec![0.0; k];
        let mut e_ln_det = vec![0.0; k];
        let mut chols = Vec::with_capacity(k);
        for (ki, comp) in self.components.iter().enumerate() {
            e_ln_pi[ki] = digamma(self.dirichlet_alpha[ki]) - digamma_total;
            e_ln_det[ki] = comp.expected_logdet_precision();
            chols.push(
                comp.scale
                    .clone()
                    .cholesky()
                    .expect("scale matrix must stay positive-definite"),
            );
        }

        let mut r = DMatrix::zeros(n, k);
        let mut logs = vec![0.0; k];
        for (ni, x) in batch.iter().enumerate() {
            for ki in 0..k {
                let comp = &self.components[ki];
                let diff = x - &comp.mean;
                // (x−m)ᵀ Ψ⁻¹ (x−m) via the Cholesky solve.
                let sol = chols[ki].solve(&diff);
                let maha = diff.dot(&sol);
                let e_quad = d / comp.concentration + comp.dof * maha;
                logs[ki] = e_ln_pi[ki] + 0.5 * e_ln_det[ki]
                    - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * e_quad;
            }
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in logs.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for ki in 0..k {
                r[(ni, ki)] = logs[ki] / sum;
            }
        }
        r
    }

    /// Conjugate refit of `prior` given responsibilities over the batch.
    pub fn refit(prior: &MixtureMap, batch: &[DVector<f64>], resp: &DMatrix<f64>) -> MixtureMap {
        let k = prior.components.len();
        let d = POINT_DIM;
        let mut out = prior.clone();
        for ki in 0..k {
            let nk: f64 = (0..batch.len()).map(|ni| resp[(ni, ki)]).sum();
            out.dirichlet_alpha[ki] = prior.dirichlet_alpha[ki] + nk;
            let p = &prior.components[ki];
            if nk < 1e-12 {
                out.components[ki] = p.clone();
                continue;
            }
            let mut xbar = DVector::zeros(d);
            for (ni, x) in batch.iter().enumerate() {
                xbar += x * resp[(ni, ki)];
            }
            xbar /= nk;
            let mut scatter = DMatrix::zeros(d, d);
            for (ni, x) in batch.iter().enumerate() {
                let diff = x - &xbar;
                scatter += &diff * diff.transpose() * resp[(ni, ki)];
            }
            let kappa = p.concentration + nk;
            let mean = (&p.mean * p.concentration + &xbar * nk) / kappa;
            let dm = &xbar - &p.mean;
            let scale =
                &p.scale + scatter + &dm * dm.transpose() * (p.concentration * nk / kappa);
            out.components[ki] = MixtureComponent {
                mean,
                scale,
                concentration: kappa,
                dof: p.dof + nk,
            };
        }
        out
    }

    /// One streaming batch update: `sweeps` rounds of CAVI against the
    /// pre-batch posterior as prior. Points must be finite 6-vectors.
    pub fn cavi_update(&self, batch: &[DVector<f64>]) -> MixtureMap {
        assert!(!batch.is_empty(), "cavi_update needs at least one point");
        for p in batch {
            assert_eq!(p.len(), POINT_DIM);
            assert!(p.iter().all(|v| v.is_finite()), "non-finite point");
        }
        let prior = self;
        let mut current = self.clone();
        for _ in 0..self.sweeps.max(1) {
            let resp = current.responsibilities(batch);
            current = MixtureMap::refit(prior, batch, &resp);
        }
        current
    }

    /// The variational lower bound of `posterior` (with responsibilities
    /// `resp`) on `batch`, relative to `prior`.
    pub fn elbo(
        prior: &MixtureMap,
        posterior: &MixtureMap,
        batch: &[DVector<f64>],
        resp: &DMatrix<f64>,
    ) -> f64 {
        let k = posterior.components.len();
        let d = POINT_DIM as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();

        let alpha_total: f64 = posterior.dirichlet_alpha.iter().sum();
        let e_ln_pi: Vec<f64> = (0..k)
            .map(|ki| digamma(posterior.dirichlet_alpha[ki]) - digamma(alpha_total))
            .collect();
        let e_ln_det: Vec<f64> =
            posterior.components.iter().map(|c| c.expected_logdet_precision()).collect();
        let chols: Vec<_> = posterior
            .components
            .iter()
            .map(|c| c.scale.clone().cholesky().expect("posterior scale PD"))
            .collect();

        // Sufficient statistics under resp.
        let mut nk = vec![0.0; k];
        let mut xbar = vec![DVector::<f64>::zeros(POINT_DIM); k];
        for ki in 0..k {
            for (ni, x) in batch.iter().enumerate() {
                nk[ki] += resp[(ni, ki)];
                xbar[ki] += x * resp[(ni, ki)];
            }
            if nk[ki] > 1e-12 {
                xbar[ki] /= nk[ki];
            }
        }
        let mut scatter = vec![DMatrix::<f64>::zeros(POINT_DIM, POINT_DIM); k];
        for ki in 0..k {
            if nk[ki] <= 1e-12 {
                continue;
            }
            for (ni, x) in batch.iter().enumerate() {
                let diff = x - &xbar[ki];
                scatter[ki] += &diff * diff.transpose() * resp[(ni, ki)];
            }
        }

        // E[ln p(X | Z, μ, Λ)]
        let mut term_lik = 0.0;
        for ki in 0..k {
            if nk[ki] <= 1e-12 {
                continue;
            }
            let c = &posterior.components[ki];
            let tr = {
                // Tr(scatter Ψ⁻¹) via column solves.
                let sol = chols[ki].solve(&scatter[ki]);
                (0..POINT_DIM).map(|i| sol[(i, i)]).sum::<f64>()
            };
            let dmean = &xbar[ki] - &c.mean;
            let sol = chols[ki].solve(&dmean);
            let maha = dmean.dot(&sol);
            term_lik += 0.5
                * (nk[ki] * (e_ln_det[ki] - d * ln2pi) - nk[ki] * d / c.concentration
                    - c.dof * tr
                    - c.dof * nk[ki] * maha);
        }

        // E[ln p(Z | π)] − E[ln q(Z)]
        let mut term_z = 0.0;
        for ki in 0..k {
            term_z += nk[ki] * e_ln_pi[ki];
        }
        let mut term_qz = 0.0;
        for ni in 0..batch.len() {
            for ki in 0..k {
                let r = resp[(ni, ki)];
                if r > 1e-300 {
                    term_qz += r * r.ln();
                }
            }
        }

        // E[ln p(π)] − E[ln q(π)] with general vector Dirichlet.
        let ln_c = |alpha: &DVector<f64>| {
            ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        };
        let mut term_pi = ln_c(&prior.dirichlet_alpha) - ln_c(&posterior.dirichlet_alpha);
        for ki in 0..k {
            term_pi +=
                (prior.dirichlet_alpha[ki] - posterior.dirichlet_alpha[ki]) * e_ln_pi[ki];
        }

        // E[ln p(μ, Λ)] − E[ln q(μ, Λ)] per component.
        let ln_b = |scale: &DMatrix<f64>, nu: f64| {
            let chol = scale.clone().cholesky().expect("scale PD");
            let logdet = 2.0 * (0..POINT_DIM).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
            0.5 * nu * logdet
                - 0.5 * nu * d * std::f64::consts::LN_2
                - 0.25 * d * (d - 1.0) * std::f64::consts::PI.ln()
                - (0..POINT_DIM).map(|i| ln_gamma((nu - i as f64) / 2.0)).sum::<f64>()
        };
        let mut term_nw = 0.0;
        for ki in 0..k {
            let q = &posterior.components[ki];
            let p = &prior.components[ki];
            // E[ln p(μ, Λ)]
            let dmean = &q.mean - &p.mean;
            let sol = chols[ki].solve(&dmean);
            let maha = dmean.dot(&sol);
            let tr_prior = {
                let sol = chols[ki].solve(&p.scale);
                (0..POINT_DIM).map(|i| sol[(i, i)]).sum::<f64>()
            };
            term_nw += 0.5
                * (d * (p.concentration / (2.0 * std::f64::consts::PI)).ln() + e_ln_det[ki]
                    - d * p.concentration / q.concentration
                    - p.concentration * q.dof * maha);
            term_nw += ln_b(&p.scale, p.dof) + 0.5 * (p.dof - d - 1.0) * e_ln_det[ki]
                - 0.5 * q.dof * tr_prior;
            // −E[ln q(μ, Λ)]
            let entropy_wishart = -ln_b(&q.scale, q.dof)
                - 0.5 * (q.dof - d - 1.0) * e_ln_det[ki]
                + 0.5 * q.dof * d;
            let e_ln_q = 0.5 * e_ln_det[ki]
                + 0.5 * d * (q.concentration / (2.0 * std::f64::consts::PI)).ln()
                - 0.5 * d
                - entropy_wishart;
            term_nw -= e_ln_q;
        }

        term_lik + term_z - term_qz + term_pi + term_nw
    }

    /// Components whose positional mean lies within `radius` of `query`,
    /// sorted by distance. Components that have absorbed less than
    /// `min_points` of responsibility mass are skipped.
    pub fn nearest_obstacles(
        &self,
        query: Vector3<f64>,
        radius: f64,
        min_points: f64,
    ) -> Vec<ObstacleHit> {
        assert!(radius > 0.0);
        let mut hits: Vec<ObstacleHit> = self
            .components
            .iter()
            .enumerate()
            .filter(|(ki, _)| self.dirichlet_alpha[*ki] - self.alpha0 >= min_points)
            .filter_map(|(_, c)| {
                let pos = Vector3::new(c.mean[0], c.mean[1], c.mean[2]);
                let dist = (pos - query).norm();
                if dist <= radius {
                    let cov = c.expected_covariance();
                    let pos_cov = cov.view((0, 0), (3, 3)).into_owned();
                    let extent = pos_cov
                        .symmetric_eigenvalues()
                        .iter()
                        .cloned()
                        .fold(0.0f64, f64::max)
                        .max(0.0)
                        .sqrt();
                    Some(ObstacleHit { position: pos, extent, distance: dist })
                } else {
                    None
                }
            })
            .collect();
        hits.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
        hits
    }

    /// Expected-weight-weighted positional density of the mixture at a 3-D
    /// point (color marginalized out).
    pub fn position_density(&self, p: Vector3<f64>, min_points: f64) -> f64 {
        let weights = self.expected_weights();
        let mut density = 0.0;
        for (ki, c) in self.components.iter().enumerate() {
            if self.dirichlet_alpha[ki] - self.alpha0 < min_points {
                continue;
            }
            let cov = c.expected_covariance();
            let pos_cov = cov.view((0, 0), (3, 3)).into_owned();
            let chol = match pos_cov.cholesky() {
                Some(c) => c,
                None => continue,
            };
            let mean = Vector3::new(c.mean[0], c.mean[1], c.mean[2]);
            let diff = DVector::from_column_slice((p - mean).as_slice());
            let sol = chol.solve(&diff);
            let maha = diff.dot(&sol);
            let logdet = 2.0 * (0..3).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
            let norm = (-0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + logdet)).exp();
            density += weights[ki] * norm * (-0.5 * maha).exp();
        }
        density
    }

    /// Projects the map onto a planar occupancy grid: a cell is occupied iff
    /// some data-bearing component's 2-D positional Mahalanobis distance to
    /// the cell center is within the configured threshold.
    pub fn occupancy_grid(
        &self,
        bounds_min: (f64, f64),
        bounds_max: (f64, f64),
        resolution: f64,
        config: &MapConfig,
    ) -> OccupancyGrid {
        assert!(resolution > 0.0);
        let width = (((bounds_max.0 - bounds_min.0) / resolution).ceil() as usize).max(1);
        let height = (((bounds_max.1 - bounds_min.1) / resolution).ceil() as usize).max(1);
        let mut grid = OccupancyGrid::new_free(width, height, resolution, bounds_min);

        for (ki, c) in self.components.iter().enumerate() {
            if self.dirichlet_alpha[ki] - self.alpha0 < config.min_points {
                continue;
            }
            let cov = c.expected_covariance();
            let (a, b, cc) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
            let det = a * cc - b * b;
            if det <= 1e-18 {
                continue;
            }
            let (inv_a, inv_b, inv_c) = (cc / det, -b / det, a / det);
            // Bounding box of the threshold ellipse.
            let r = config.mahalanobis_sq.sqrt();
            let half_x = r * a.sqrt();
            let half_y = r * cc.sqrt();
            let (mx, my) = (c.mean[0], c.mean[1]);
            let ix0 = (((mx - half_x) - bounds_min.0) / resolution).floor().max(0.0) as usize;
            let iy0 = (((my - half_y) - bounds_min.1) / resolution).floor().max(0.0) as usize;
            let ix1 =
                ((((mx + half_x) - bounds_min.0) / resolution).ceil() as usize).min(width - 1);
            let iy1 =
                ((((my + half_y) - bounds_min.1) / resolution).ceil() as usize).min(height - 1);
            for iy in iy0..=iy1 {
                for ix in ix0..=ix1 {
                    let (cx, cy) = grid.cell_center(ix, iy);
                    let dx = cx - mx;
                    let dy = cy - my;
                    let maha = inv_a * dx * dx + 2.0 * inv_b * dx * dy + inv_c * dy * dy;
                    if maha <= config.mahalanobis_sq {
                        grid.set(ix, iy, Cell::Occupied);
                    }
                }
            }
        }
        grid
    }

    /// Flat snapshot of the map for plotting: weight, mean, and the lower
    /// Cholesky factor of the expected covariance per data-bearing component.
    pub fn snapshot(&self, min_points: f64) -> Vec<ComponentRecord> {
        let weights = self.expected_weights();
        self.components
            .iter()
            .enumerate()
            .filter(|(ki, _)| self.dirichlet_alpha[*ki] - self.alpha0 >= min_points)
            .filter_map(|(ki, c)| {
                let cov = c.expected_covariance();
                let chol = cov.cholesky()?;
                let l = chol.l();
                let mut factors = Vec::with_capacity(POINT_DIM * (POINT_DIM + 1) / 2);
                for r in 0..POINT_DIM {
                    for cix in 0..=r {
                        factors.push(l[(r, cix)]);
                    }
                }
                Some(ComponentRecord {
                    weight: weights[ki],
                    mean: c.mean.iter().cloned().collect(),
                    cov_cholesky: factors,
                })
            })
            .collect()
    }

    /// Writes a snapshot as a flat CSV: `weight, mean0..5, L00, L10, L11, ...`.
    pub fn write_snapshot_csv<W: std::io::Write>(
        &self,
        min_points: f64,
        out: &mut W,
    ) -> std::io::Result<usize> {
        let records = self.snapshot(min_points);
        writeln!(
            out,
            "weight,mx,my,mz,cr,cg,cb,{}",
            (0..POINT_DIM * (POINT_DIM + 1) / 2)
                .map(|i| format!("l{i}"))
                .collect::<Vec<_>>()
                .join(",")
        )?;
        for r in &records {
            let mean = r.mean.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(",");
            let fac =
                r.cov_cholesky.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(",");
            writeln!(out, "{:.9},{},{}", r.weight, mean, fac)?;
        }
        Ok(records.len())
    }
}

/// One exported mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_cholesky: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn point(p: [f64; 3], c: [f64; 3]) -> DVector<f64> {
        DVector::from_vec(vec![p[0], p[1], p[2], c[0], c[1], c[2]])
    }

    fn small_config(k: usize) -> MapConfig {
        MapConfig {
            components: k,
            bounds_min: [-2.0, -2.0, 0.0],
            bounds_max: [2.0, 2.0, 1.0],
            seed: 3,
            ..MapConfig::default()
        }
    }

    #[test]
    fn single_component_converges_to_batch_mean() {
        let map = MixtureMap::new(&small_config(1));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let center = [0.7, -0.4, 0.5];
        let batch: Vec<_> = (0..500)
            .map(|_| {
                point(
                    [
                        center[0] + rng.gen_range(-0.05..0.05),
                        center[1] + rng.gen_range(-0.05..0.05),
                        center[2] + rng.gen_range(-0.05..0.05),
                    ],
                    [0.5, 0.5, 0.5],
                )
            })
            .collect();
        let updated = map.cavi_update(&batch);
        for i in 0..3 {
            assert_relative_eq!(updated.components[0].mean[i], center[i], epsilon = 5e-3);
        }
    }

    #[test]
    fn elbo_non_decreasing_over_sweeps() {
        let prior = MixtureMap::new(&small_config(4));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch: Vec<_> = (0..120)
            .map(|i| {
                let c = if i % 2 == 0 { [-1.0, -1.0, 0.3] } else { [1.0, 1.0, 0.6] };
                point(
                    [
                        c[0] + rng.gen_range(-0.1..0.1),
                        c[1] + rng.gen_range(-0.1..0.1),
                        c[2] + rng.gen_range(-0.1..0.1),
                    ],
                    [rng.gen_range(0.0..1.0), 0.2, 0.8],
                )
            })
            .collect();
        let mut current = prior.clone();
        let mut prev = f64::NEG_INFINITY;
        for sweep in 0..8 {
            let resp = current.responsibilities(&batch);
            current = MixtureMap::refit(&prior, &batch, &resp);
            let resp_after = current.responsibilities(&batch);
            let bound = MixtureMap::elbo(&prior, &current, &batch, &resp_after);
            assert!(
                bound >= prev - 1e-9,
                "ELBO decreased at sweep {sweep}: {prev} -> {bound}"
            );
            prev = bound;
        }
    }

    #[test]
    fn two_clusters_separate() {
        let map = MixtureMap::new(&small_config(2));
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut batch = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            let (c, l) = if i % 2 == 0 { ([-1.2, -1.0, 0.2], 0) } else { ([1.2, 1.0, 0.8], 1) };
            batch.push(point(
                [
                    c[0] + rng.gen_range(-0.08..0.08),
                    c[1] + rng.gen_range(-0.08..0.08),
                    c[2] + rng.gen_range(-0.04..0.04),
                ],
                [0.5, 0.5, 0.5],
            ));
            labels.push(l);
        }
        let updated = map.cavi_update(&batch);
        let resp = updated.responsibilities(&batch);

        // Independent oracle: plain EM on positions with known-center init.
        let oracle = em_labels(&batch, &[[-1.2, -1.0, 0.2], [1.2, 1.0, 0.8]]);

        // Align component indices to oracle labels by majority vote.
        let mut votes = [[0usize; 2]; 2];
        for (ni, &ol) in oracle.iter().enumerate() {
            let kmax = if resp[(ni, 0)] > resp[(ni, 1)] { 0 } else { 1 };
            votes[ol][kmax] += 1;
        }
        let map0 = if votes[0][0] >= votes[0][1] { 0 } else { 1 };
        let mut agree = 0;
        for (ni, &ol) in oracle.iter().enumerate() {
            let kmax = if resp[(ni, 0)] > resp[(ni, 1)] { 0 } else { 1 };
            let mapped = if kmax == map0 { 0 } else { 1 };
            if mapped == ol {
                agree += 1;
            }
        }
        let ratio = agree as f64 / oracle.len() as f64;
        assert!(ratio > 0.99, "label agreement with EM oracle only {ratio}");
    }

    /// Tiny EM on 3-D positions, spherical covariance, as a labeling oracle.
    fn em_labels(batch: &[DVector<f64>], init: &[[f64; 3]; 2]) -> Vec<usize> {
        let mut means = [
            Vector3::new(init[0][0], init[0][1], init[0][2]),
            Vector3::new(init[1][0], init[1][1], init[1][2]),
        ];
        let mut labels = vec![0usize; batch.len()];
        for _ in 0..20 {
            for (ni, x) in batch.iter().enumerate() {
                let p = Vector3::new(x[0], x[1], x[2]);
                labels[ni] = if (p - means[0]).norm() <= (p - means[1]).norm() { 0 } else { 1 };
            }
            for k in 0..2 {
                let mut sum = Vector3::zeros();
                let mut count = 0.0;
                for (ni, x) in batch.iter().enumerate() {
                    if labels[ni] == k {
                        sum += Vector3::new(x[0], x[1], x[2]);
                        count += 1.0;
                    }
                }
                if count > 0.0 {
                    means[k] = sum / count;
                }
            }
        }
        labels
    }

    #[test]
    fn permutation_invariance_within_batch() {
        let map = MixtureMap::new(&small_config(3));
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let batch: Vec<_> = (0..60)
            .map(|_| {
                point(
                    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)],
                    [0.3, 0.3, 0.3],
                )
            })
            .collect();
        let mut shuffled = batch.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let a = map.cavi_update(&batch);
        let b = map.cavi_update(&shuffled);
        for (ca, cb) in a.components.iter().zip(&b.components) {
            assert!((&ca.mean - &cb.mean).norm() < 1e-9);
            assert!((&ca.scale - &cb.scale).norm() < 1e-9);
        }
    }

    #[test]
    fn degenerate_batch_stays_positive_definite() {
        let map = MixtureMap::new(&small_config(4));
        let batch: Vec<_> = (0..50).map(|_| point([0.5, 0.5, 0.5], [1.0, 0.0, 0.0])).collect();
        let mut current = map;
        for _ in 0..5 {
            current = current.cavi_update(&batch);
            for c in &current.components {
                assert!(c.scale.clone().cholesky().is_some(), "scale lost positive-definiteness");
            }
        }
    }

    #[test]
    fn nearest_obstacles_cases() {
        let config = small_config(8);
        let map = MixtureMap::new(&config);
        // Fresh map: nothing has absorbed data, so no hits.
        assert!(map.nearest_obstacles(Vector3::zeros(), 10.0, config.min_points).is_empty());

        // Feed a cluster at a known location.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let batch: Vec<_> = (0..200)
            .map(|_| {
                point(
                    [
                        0.3 + rng.gen_range(-0.03..0.03),
                        0.0 + rng.gen_range(-0.03..0.03),
                        0.5 + rng.gen_range(-0.03..0.03),
                    ],
                    [0.9, 0.1, 0.1],
                )
            })
            .collect();
        let updated = map.cavi_update(&batch);
        let hits = updated.nearest_obstacles(Vector3::new(0.0, 0.0, 0.5), 0.5, config.min_points);
        assert!(!hits.is_empty());
        assert_relative_eq!(hits[0].distance, 0.3, epsilon = 0.05);

        // Outside the radius: empty.
        assert!(updated
            .nearest_obstacles(Vector3::new(5.0, 5.0, 0.5), 0.5, config.min_points)
            .is_empty());

        // Oracle: brute-force scan over all data-bearing components.
        let query = Vector3::new(0.1, 0.1, 0.4);
        let radius = 1.0;
        let hits = updated.nearest_obstacles(query, radius, config.min_points);
        let mut oracle: Vec<(usize, f64)> = updated
            .components
            .iter()
            .enumerate()
            .filter(|(ki, _)| updated.dirichlet_alpha[*ki] - updated.alpha0 >= config.min_points)
            .map(|(ki, c)| (ki, (Vector3::new(c.mean[0], c.mean[1], c.mean[2]) - query).norm()))
            .filter(|(_, d)| *d <= radius)
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        assert_eq!(hits.len(), oracle.len());
        for (h, (_, d)) in hits.iter().zip(&oracle) {
            assert_relative_eq!(h.distance, *d, epsilon = 1e-12);
        }
    }

    #[test]
    fn occupancy_empty_and_blob() {
        let config = small_config(6);
        let map = MixtureMap::new(&config);
        let grid = map.occupancy_grid((-2.0, -2.0), (2.0, 2.0), 0.1, &config);
        for iy in 0..grid.height() {
            for ix in 0..grid.width() {
                assert!(grid.is_free(ix, iy), "fresh map must rasterize all-free");
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let batch: Vec<_> = (0..300)
            .map(|_| {
                point(
                    [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.5],
                    [0.2, 0.2, 0.9],
                )
            })
            .collect();
        let updated = map.cavi_update(&batch);
        let grid = updated.occupancy_grid((-2.0, -2.0), (2.0, 2.0), 0.1, &config);
        let (cx, cy) = grid.cell_of(0.0, 0.0).unwrap();
        assert!(!grid.is_free(cx, cy), "blob center must be occupied");
        // Connectivity: flood from the center stays within a small disc and
        // covers every occupied cell.
        let mut seen = vec![false; grid.width() * grid.height()];
        let mut queue = vec![(cx, cy)];
        seen[cy * grid.width() + cx] = true;
        let mut count = 0;
        while let Some((ix, iy)) = queue.pop() {
            count += 1;
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let nx = ix as i64 + dx;
                let ny = iy as i64 + dy;
                if nx < 0 || ny < 0 || nx >= grid.width() as i64 || ny >= grid.height() as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !seen[ny * grid.width() + nx] && !grid.is_free(nx, ny) {
                    seen[ny * grid.width() + nx] = true;
                    queue.push((nx, ny));
                }
            }
        }
        let occupied_total: usize = (0..grid.height())
            .flat_map(|iy| (0..grid.width()).map(move |ix| (ix, iy)))
            .filter(|&(ix, iy)| !grid.is_free(ix, iy))
            .count();
        assert_eq!(count, occupied_total, "occupied cells form one connected blob");
    }

    #[test]
    fn snapshot_counts_match() {
        let config = small_config(5);
        let map = MixtureMap::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let batch: Vec<_> = (0..200)
            .map(|_| {
                point(
                    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)],
                    [0.5, 0.5, 0.5],
                )
            })
            .collect();
        let updated = map.cavi_update(&batch);
        let records = updated.snapshot(config.min_points);
        let mut buf = Vec::new();
        let written = updated.write_snapshot_csv(config.min_points, &mut buf).unwrap();
        assert_eq!(written, records.len());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), records.len() + 1);
    }
}
