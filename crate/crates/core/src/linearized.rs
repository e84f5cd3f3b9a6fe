//! Adjoint sensitivity kernels of both forward maps around a background medium,
//! the linear maps they induce on prior coefficients, and Gaussian posteriors
//! of the linearized problems.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bayes::{DataVector, ForwardModel};
use crate::diffusion::{solve_de_adjoint, solve_de_trace};
use crate::discretization::{AngularQuadrature, ScalarField, SpatialGrid};
use crate::error::{Error, Result};
use crate::measurement::{ForwardData, MeasurementSetup, ModelTag};
use crate::medium::{Coefficients, Medium, PriorSpec};
use crate::scalar::Real;
use crate::transport::{lift_boundary, solve_rte, solve_rte_adjoint, Lift, TransportOptions};

/// Inflow data used for the forward and adjoint transport solves of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLifts {
    pub forward: Lift,
    pub adjoint: Lift,
}

impl Default for KernelLifts {
    fn default() -> Self {
        KernelLifts {
            forward: Lift::One,
            adjoint: Lift::Zero,
        }
    }
}

/// Sensitivity kernels `gamma_jk`, stored detector-major at index `j * K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<S> {
    pub model: ModelTag,
    pub epsilon: Option<f64>,
    /// Background log-medium `u0`.
    pub background: ScalarField<S>,
    pub detectors: usize,
    pub traces: usize,
    pub kernels: Vec<ScalarField<S>>,
}

impl<S: Real> KernelBank<S> {
    pub fn kernel(&self, j: usize, k: usize) -> &ScalarField<S> {
        &self.kernels[j * self.traces + k]
    }

    pub fn is_finite(&self) -> bool {
        self.kernels.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Largest nodal difference over all kernels.
    pub fn max_abs_difference(&self, other: &KernelBank<S>) -> Result<S> {
        if self.kernels.len() != other.kernels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.kernels.len(),
                actual: other.kernels.len(),
                context: "kernel banks",
            });
        }
        Ok(self
            .kernels
            .iter()
            .zip(&other.kernels)
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (*x - *y).abs())
                    .fold(S::zero(), S::max)
            })
            .fold(S::zero(), S::max))
    }

    /// Nodal differences per `(j, k)`.
    pub fn pairwise_gaps(&self, other: &KernelBank<S>) -> Vec<S> {
        self.kernels
            .iter()
            .zip(&other.kernels)
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (*x - *y).abs())
                    .fold(S::zero(), S::max)
            })
            .collect()
    }

    /// Plain nodes-and-values record for inspection.
    pub fn export(&self, grid: &SpatialGrid<S>) -> KernelExport {
        KernelExport {
            model: self.model,
            epsilon: self.epsilon,
            nodes: grid.nodes().iter().map(|x| [x[0].as_f64(), x[1].as_f64()]).collect(),
            background: self.background.iter().map(|v| v.as_f64()).collect(),
            kernels: (0..self.detectors)
                .flat_map(|j| (0..self.traces).map(move |k| (j, k)))
                .map(|(j, k)| KernelRecord {
                    detector: j,
                    source: k,
                    values: self.kernel(j, k).iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub detector: usize,
    pub source: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelExport {
    pub model: ModelTag,
    pub epsilon: Option<f64>,
    pub nodes: Vec<[f64; 2]>,
    pub background: Vec<f64>,
    pub kernels: Vec<KernelRecord>,
}

/// Transport kernels `gamma_jk = -(sigma0 / (C_d eps^2)) <g_j L f_k>`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_bank_rte<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    background: &Medium<S>,
    epsilon: S,
    setup: &MeasurementSetup,
    lifts: KernelLifts,
    options: &TransportOptions,
) -> Result<KernelBank<S>> {
    let detectors = setup.resolve_detectors(grid)?;
    let n = grid.node_count();
    let nq = quad.len();
    let collided: Vec<_> = setup
        .traces
        .iter()
        .enumerate()
        .map(|(k, trace)| {
            let bc = lift_boundary(grid, quad, background, epsilon, trace, lifts.forward)?;
            let sol = solve_rte(grid, quad, background, epsilon, &bc, options)
                .map_err(|e| e.context(format!("linearized source {k}")))?;
            Ok(sol.flux.collided(quad))
        })
        .collect::<Result<_>>()?;
    let adjoints: Vec<_> = detectors
        .iter()
        .enumerate()
        .map(|(j, d)| {
            solve_rte_adjoint(grid, quad, background, epsilon, d, lifts.adjoint, options)
                .map(|s| s.flux)
                .map_err(|e| e.context(format!("adjoint for detector {j}")))
        })
        .collect::<Result<_>>()?;

    let sigma = background.sigma();
    let scale = -S::one() / (quad.second_moment() * epsilon * epsilon);
    let weights = quad.weights();
    let mut kernels = Vec::with_capacity(detectors.len() * collided.len());
    for g in &adjoints {
        for lf in &collided {
            let values = (0..n)
                .map(|x| {
                    let s: S = (0..nq).map(|q| weights[q] * g.get(x, q) * lf.get(x, q)).sum();
                    scale * sigma[x] * s
                })
                .collect();
            kernels.push(ScalarField(values));
        }
    }
    Ok(KernelBank {
        model: ModelTag::Transport,
        epsilon: Some(epsilon.as_f64()),
        background: background.log().clone(),
        detectors: detectors.len(),
        traces: collided.len(),
        kernels,
    })
}

/// Diffusion kernels `gamma_jk = -sigma0^-1 grad rho_k . grad rho_g,j`.
///
/// The sign is the one under which `G w` is the derivative of the
/// Dirichlet-to-Neumann data along the log-medium perturbation `w`.
pub fn kernel_bank_de<S: Real>(
    grid: &SpatialGrid<S>,
    background: &Medium<S>,
    setup: &MeasurementSetup,
) -> Result<KernelBank<S>> {
    let detectors = setup.resolve_detectors(grid)?;
    let sources = setup
        .traces
        .iter()
        .map(|t| grid.gradient(&solve_de_trace(grid, background, t)?.density))
        .collect::<Result<Vec<_>>>()?;
    let adjoints = detectors
        .iter()
        .map(|d| grid.gradient(&solve_de_adjoint(grid, background, d)?.density))
        .collect::<Result<Vec<_>>>()?;
    let sigma = background.sigma();
    let mut kernels = Vec::with_capacity(detectors.len() * sources.len());
    for gg in &adjoints {
        for gr in &sources {
            let values = (0..grid.node_count())
                .map(|x| -(gr[x][0] * gg[x][0] + gr[x][1] * gg[x][1]) / sigma[x])
                .collect();
            kernels.push(ScalarField(values));
        }
    }
    Ok(KernelBank {
        model: ModelTag::Diffusion,
        epsilon: None,
        background: background.log().clone(),
        detectors: detectors.len(),
        traces: sources.len(),
        kernels,
    })
}

/// `G[jk, m] = int gamma_jk psi_m dx` by the trapezoidal rule.
pub fn linear_map<S: Real>(bank: &KernelBank<S>, prior: &PriorSpec, grid: &SpatialGrid<S>) -> Result<DMatrix<S>> {
    let basis: Vec<ScalarField<S>> = (0..prior.basis_size).map(|m| prior.basis_field(grid, m)).collect();
    let mut g = DMatrix::zeros(bank.kernels.len(), basis.len());
    for (row, gamma) in bank.kernels.iter().enumerate() {
        grid.check_len(gamma.len(), "kernel")?;
        for (m, psi) in basis.iter().enumerate() {
            let prod: Vec<S> = gamma.iter().zip(psi.iter()).map(|(a, b)| *a * *b).collect();
            g[(row, m)] = grid.integrate(&prod);
        }
    }
    Ok(g)
}

/// `y - G(u0)` flattened detector-major.
pub fn linearized_data<S: Real>(data: &DataVector, background: &ForwardData<S>) -> Result<DVector<f64>> {
    if data.values.shape() != background.values.shape() {
        return Err(Error::DimensionMismatch {
            expected: data.values.len(),
            actual: background.values.len(),
            context: "linearized data",
        });
    }
    let y = data.flatten();
    let g = background.flatten();
    Ok(DVector::from_iterator(
        y.len(),
        y.iter().zip(&g).map(|(a, b)| a - b.as_f64()),
    ))
}

/// `max |G theta - (F(theta0 + theta) - F(theta0))|` for one forward model.
pub fn tangent_residual<S: Real>(
    model: &ForwardModel<S>,
    tag: ModelTag,
    g: &DMatrix<S>,
    theta0: &Coefficients<S>,
    w: &Coefficients<S>,
    epsilon: S,
) -> Result<S> {
    let base = model.forward(tag, theta0, epsilon)?.flatten();
    let shifted = Coefficients(theta0.0.iter().zip(&w.0).map(|(a, b)| *a + *b).collect());
    let moved = model.forward(tag, &shifted, epsilon)?.flatten();
    let lin = g * DVector::from_column_slice(&w.0);
    Ok((0..base.len())
        .map(|i| (lin[i] - (moved[i] - base[i])).abs())
        .fold(S::zero(), S::max))
}

/// Gaussian measure on coefficient space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<S: Real> {
    pub mean: DVector<S>,
    pub covariance: DMatrix<S>,
}

/// Mean, covariance and covariance eigenvalues for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl<S: Real> GaussianPosterior<S> {
    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn eigenvalues(&self) -> Vec<S> {
        let mut ev: Vec<S> = SymmetricEigen::new(self.covariance.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    pub fn summary(&self) -> PosteriorSummary {
        let m = self.dimension();
        PosteriorSummary {
            mean: self.mean.iter().map(|v| v.as_f64()).collect(),
            covariance: (0..m)
                .map(|i| (0..m).map(|j| self.covariance[(i, j)].as_f64()).collect())
                .collect(),
            eigenvalues: self.eigenvalues().into_iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// True when `other - self` is positive semidefinite up to `tol`.
    pub fn contracts(&self, other_covariance: &DMatrix<S>, tol: S) -> bool {
        let diff = other_covariance - &self.covariance;
        SymmetricEigen::new(diff).eigenvalues.iter().all(|&e| e >= -tol)
    }
}

fn symmetrize<S: Real>(m: &mut DMatrix<S>) {
    let t = m.transpose();
    *m += t;
    *m *= S::lit(0.5);
}

/// Posterior of `z = G theta + eta`, `eta ~ N(0, gamma^2 I)`, under a Gaussian prior.
///
/// Uses the observation-space form `C - C G^T S^-1 G C` with the Cholesky
/// factor of `S = G C G^T + gamma^2 I`.
pub fn gaussian_update<S: Real>(
    g: &DMatrix<S>,
    prior_covariance: &DMatrix<S>,
    prior_mean: &DVector<S>,
    gamma: S,
    z: &DVector<S>,
) -> Result<GaussianPosterior<S>> {
    let m = prior_mean.len();
    if prior_covariance.shape() != (m, m) || g.ncols() != m || g.nrows() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: g.ncols(),
            context: "gaussian update",
        });
    }
    if !(gamma > S::zero()) {
        return Err(Error::InvalidArgument("noise level must be positive".into()));
    }
    if prior_covariance.clone().cholesky().is_none()
        || (prior_covariance - prior_covariance.transpose()).amax() > S::lit(1e-12) * prior_covariance.amax()
    {
        return Err(Error::NotPositiveDefinite("prior covariance"));
    }
    let cgt = prior_covariance * g.transpose();
    let mut s = g * &cgt;
    for i in 0..s.nrows() {
        s[(i, i)] += gamma * gamma;
    }
    symmetrize(&mut s);
    let chol = s
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("observation covariance"))?;
    let innovation = z - g * prior_mean;
    let mean = prior_mean + &cgt * chol.solve(&innovation);
    let mut covariance = prior_covariance - &cgt * chol.solve(&cgt.transpose());
    symmetrize(&mut covariance);
    Ok(GaussianPosterior { mean, covariance })
}

/// `(|m_p - m_q|_2, |C_p - C_q|_2)`.
pub fn moment_distance<S: Real>(p: &GaussianPosterior<S>, q: &GaussianPosterior<S>) -> Result<(S, S)> {
    if p.dimension() != q.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            actual: q.dimension(),
            context: "moment distance",
        });
    }
    let mean_gap = (&p.mean - &q.mean).norm();
    let diff = &p.covariance - &q.covariance;
    let cov_gap = SymmetricEigen::new(diff)
        .eigenvalues
        .iter()
        .map(|e| e.abs())
        .fold(S::zero(), S::max);
    Ok((mean_gap, cov_gap))
}

fn log_det<S: Real>(c: &DMatrix<S>) -> Result<S> {
    let chol = c.clone().cholesky().ok_or(Error::NotPositiveDefinite("covariance"))?;
    Ok(S::lit(2.0) * chol.l().diagonal().iter().map(|d| d.ln()).sum::<S>())
}

/// Hellinger distance between two Gaussians, with `d^2 = 1 - BC`.
pub fn gaussian_hellinger<S: Real>(p: &GaussianPosterior<S>, q: &GaussianPosterior<S>) -> Result<S> {
    if p.dimension() != q.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            actual: q.dimension(),
            context: "gaussian hellinger",
        });
    }
    let half = S::lit(0.5);
    let quarter = S::lit(0.25);
    let avg = (&p.covariance + &q.covariance) * half;
    let dm = &p.mean - &q.mean;
    let chol = avg
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("averaged covariance"))?;
    let maha = dm.dot(&chol.solve(&dm));
    let log_bc = quarter * log_det(&p.covariance)? + quarter * log_det(&q.covariance)?
        - half * log_det(&avg)?
        - S::lit(0.125) * maha;
    let d2 = S::one() - log_bc.exp();
    Ok(d2.max(S::zero()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::Geometry;
    use crate::measurement::{Mollifier, QuadraticTrace};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn slab_setup(detectors: Vec<[f64; 2]>, traces: Vec<QuadraticTrace>) -> MeasurementSetup {
        MeasurementSetup {
            detectors,
            traces,
            noise: 0.05,
            mollifier: Mollifier::Point,
        }
    }

    #[test]
    fn de_kernel_examples() {
        let g = SpatialGrid::<f64>::slab(32).unwrap();
        let m = Medium::constant(&g, 1.0, 10.0).unwrap();
        let setup = slab_setup(
            vec![[1.0, 0.0], [0.0, 0.0]],
            vec![QuadraticTrace::coordinate(), QuadraticTrace::constant(2.0)],
        );
        let bank = kernel_bank_de(&g, &m, &setup).unwrap();
        assert!(bank.kernel(0, 0).iter().all(|v| (v + 1.0).abs() < 1e-12));
        assert!(bank.kernel(1, 0).iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(bank.kernel(0, 1).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rte_kernel_of_constant_source_vanishes() {
        let g = SpatialGrid::<f64>::slab(64).unwrap();
        let q = AngularQuadrature::new(Geometry::Slab, 8).unwrap();
        let m = Medium::constant(&g, 1.0, 10.0).unwrap();
        let setup = slab_setup(vec![[1.0, 0.0]], vec![QuadraticTrace::constant(1.0)]);
        let bank = kernel_bank_rte(
            &g,
            &q,
            &m,
            0.1,
            &setup,
            KernelLifts::default(),
            &TransportOptions::default(),
        )
        .unwrap();
        assert!(bank.kernel(0, 0).max_abs() <= 1e-4);
    }

    #[test]
    fn linear_map_examples() {
        let g = SpatialGrid::<f64>::slab(64).unwrap();
        let bank = KernelBank {
            model: ModelTag::Diffusion,
            epsilon: None,
            background: ScalarField::constant(&g, 0.0),
            detectors: 1,
            traces: 1,
            kernels: vec![ScalarField::constant(&g, 1.0)],
        };
        let lm = linear_map(&bank, &PriorSpec::default(), &g).unwrap();
        assert_abs_diff_eq!(lm[(0, 0)], 1.0, epsilon = 1e-14);
        assert!(lm[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn gaussian_update_examples() {
        let p = gaussian_update(&dmatrix![1.0], &dmatrix![1.0], &dvector![0.0], 1.0, &dvector![2.0]).unwrap();
        assert_abs_diff_eq!(p.covariance[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.mean[0], 1.0, epsilon = 1e-15);

        let p = gaussian_update(
            &dmatrix![1.0, 0.0],
            &DMatrix::identity(2, 2),
            &dvector![0.0, 0.0],
            1.0,
            &dvector![3.0],
        )
        .unwrap();
        assert_abs_diff_eq!(p.mean, dvector![1.5, 0.0], epsilon = 1e-15);
        assert_abs_diff_eq!(p.covariance, dmatrix![0.5, 0.0; 0.0, 1.0], epsilon = 1e-15);

        let c = dmatrix![2.0, 0.3; 0.3, 1.0];
        let m0 = dvector![0.2, -0.1];
        let p = gaussian_update(&DMatrix::zeros(3, 2), &c, &m0, 0.1, &dvector![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.covariance, c);
        assert_eq!(p.mean, m0);

        assert!(matches!(
            gaussian_update(
                &dmatrix![1.0, 0.0],
                &dmatrix![1.0, 2.0; 2.0, 1.0],
                &dvector![0.0, 0.0],
                1.0,
                &dvector![0.0]
            ),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn moment_distance_examples() {
        let a = GaussianPosterior {
            mean: dvector![0.0, 0.0],
            covariance: DMatrix::identity(2, 2),
        };
        let b = GaussianPosterior {
            mean: dvector![3.0, 4.0],
            covariance: DMatrix::identity(2, 2),
        };
        assert_eq!(moment_distance(&a, &a).unwrap(), (0.0, 0.0));
        assert_abs_diff_eq!(moment_distance(&a, &b).unwrap().0, 5.0, epsilon = 1e-15);
        assert_eq!(gaussian_hellinger(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_hellinger_closed_forms() {
        // unit variances, means 0 and 1: d^2 = 1 - exp(-1/8)
        let a = GaussianPosterior {
            mean: dvector![0.0],
            covariance: dmatrix![1.0],
        };
        let b = GaussianPosterior {
            mean: dvector![1.0],
            covariance: dmatrix![1.0],
        };
        let d = gaussian_hellinger(&a, &b).unwrap();
        assert_abs_diff_eq!(d * d, 1.0 - (-0.125f64).exp(), epsilon = 1e-14);
        // zero means, variances 1 and 4: d^2 = 1 - sqrt(2 * 1 * 2 / 5)
        let c = GaussianPosterior {
            mean: dvector![0.0],
            covariance: dmatrix![4.0],
        };
        let d = gaussian_hellinger(&a, &c).unwrap();
        assert_abs_diff_eq!(d * d, 1.0 - (4.0f64 / 5.0).sqrt(), epsilon = 1e-14);
    }
}
