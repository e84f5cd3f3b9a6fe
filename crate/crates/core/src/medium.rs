//! Scattering media `sigma = exp(u)`, their admissibility check, and cosine-series priors.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discretization::{Geometry, ScalarField, SpatialGrid};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec2};

/// Coordinates of a log-medium (or of a log-medium perturbation) in the prior basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coefficients<S>(pub Vec<S>);

impl<S: Real> Coefficients<S> {
    pub fn zeros(len: usize) -> Self {
        Coefficients(vec![S::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<S> std::ops::Deref for Coefficients<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        &self.0
    }
}

/// Cosine-series Gaussian prior on the log-medium.
///
/// Coefficient `m` (counted from one) multiplies the `m`-th cosine mode and
/// has standard deviation `amplitude * m^(-decay)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub basis_size: usize,
    pub amplitude: f64,
    pub decay: f64,
    #[serde(default)]
    pub mean_offset: f64,
    pub bound: f64,
    #[serde(default = "PriorSpec::default_max_rejections")]
    pub max_rejections: usize,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            basis_size: 3,
            amplitude: 0.3,
            decay: 2.0,
            mean_offset: 0.0,
            bound: 10.0,
            max_rejections: Self::default_max_rejections(),
        }
    }
}

impl PriorSpec {
    fn default_max_rejections() -> usize {
        1000
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis_size == 0 {
            return Err(Error::InvalidArgument("prior basis size must be positive".into()));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior amplitude must be non-negative, got {}",
                self.amplitude
            )));
        }
        if !(self.decay >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prior decay must be at least 1, got {}",
                self.decay
            )));
        }
        if !(self.bound > 0.0) || !self.mean_offset.is_finite() {
            return Err(Error::InvalidArgument("admissibility bound must be positive".into()));
        }
        Ok(())
    }

    /// Standard deviation of every coefficient.
    pub fn std_devs<S: Real>(&self) -> Vec<S> {
        (1..=self.basis_size)
            .map(|m| S::lit(self.amplitude * (m as f64).powf(-self.decay)))
            .collect()
    }

    /// Basis function `index` (zero-based) evaluated at `x`.
    pub fn basis<S: Real>(&self, geometry: Geometry, index: usize, x: Vec2<S>) -> S {
        let pi = S::pi();
        match geometry {
            Geometry::Slab => (S::of(index) * pi * x[0]).cos(),
            Geometry::Square => {
                let (a, b) = square_mode(index);
                (S::of(a) * pi * x[0]).cos() * (S::of(b) * pi * x[1]).cos()
            }
        }
    }

    /// Basis function `index` sampled on the grid.
    pub fn basis_field<S: Real>(&self, grid: &SpatialGrid<S>, index: usize) -> ScalarField<S> {
        grid.sample(|x| self.basis(grid.geometry(), index, x))
    }

    /// Log-medium `mean_offset + sum_m theta_m psi_m` at the nodes.
    pub fn log_medium<S: Real>(&self, theta: &Coefficients<S>, grid: &SpatialGrid<S>) -> Result<ScalarField<S>> {
        if theta.len() != self.basis_size {
            return Err(Error::DimensionMismatch {
                expected: self.basis_size,
                actual: theta.len(),
                context: "prior coefficients",
            });
        }
        let offset = S::lit(self.mean_offset);
        let geometry = grid.geometry();
        Ok(grid.sample(|x| {
            theta
                .iter()
                .enumerate()
                .fold(offset, |u, (m, &t)| u + t * self.basis(geometry, m, x))
        }))
    }

    /// Medium for coefficients `theta`, with admissibility evaluated on the grid.
    pub fn medium<S: Real>(&self, theta: &Coefficients<S>, grid: &SpatialGrid<S>) -> Result<Medium<S>> {
        let u = self.log_medium(theta, grid)?;
        Medium::from_log(grid, u, S::lit(self.bound))
    }

    /// Draws one coefficient vector without the admissibility check.
    pub fn draw_gaussian<S: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Coefficients<S> {
        Coefficients(
            self.std_devs::<S>()
                .into_iter()
                .map(|sd| {
                    let z: f64 = rng.sample(StandardNormal);
                    sd * S::lit(z)
                })
                .collect(),
        )
    }

    /// Draws an admissible coefficient vector by rejection.
    pub fn sample<S: Real, R: Rng + ?Sized>(&self, grid: &SpatialGrid<S>, rng: &mut R) -> Result<Coefficients<S>> {
        self.validate()?;
        for _ in 0..self.max_rejections.max(1) {
            let theta = self.draw_gaussian(rng);
            if self.medium(&theta, grid)?.is_admissible() {
                return Ok(theta);
            }
        }
        Err(Error::PriorRejection {
            attempts: self.max_rejections.max(1),
        })
    }

    /// Covariance of the untruncated Gaussian prior, `diag(amplitude^2 m^(-2 decay))`.
    pub fn covariance<S: Real>(&self) -> DMatrix<S> {
        let sd = self.std_devs::<S>();
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(sd.len(), sd.iter().map(|&s| s * s)))
    }
}

/// Cosine mode pair for a square basis index, ordered by total degree then by
/// decreasing first index: (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...
pub fn square_mode(index: usize) -> (usize, usize) {
    let mut degree = 0;
    let mut start = 0;
    while start + degree < index {
        start += degree + 1;
        degree += 1;
    }
    let offset = index - start;
    (degree - offset, offset)
}

/// The three sup-norms bounded by the admissibility constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibilityNorms<S> {
    pub sigma: S,
    pub inverse_sigma: S,
    pub gradient_inverse_sigma: S,
}

/// Positive scattering coefficient `sigma = exp(u)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Medium<S> {
    log: ScalarField<S>,
    sigma: ScalarField<S>,
    bound: S,
    norms: AdmissibilityNorms<S>,
}

impl<S: Real> Medium<S> {
    pub fn from_log(grid: &SpatialGrid<S>, log: ScalarField<S>, bound: S) -> Result<Self> {
        grid.check_len(log.len(), "log-medium")?;
        if log.iter().any(|u| !u.is_finite()) {
            return Err(Error::InvalidArgument("log-medium has non-finite values".into()));
        }
        let sigma = ScalarField(log.iter().map(|&u| u.exp()).collect());
        let inverse: Vec<S> = sigma.iter().map(|&s| S::one() / s).collect();
        let grad = grid.gradient(&inverse)?;
        let norms = AdmissibilityNorms {
            sigma: sigma.max_abs(),
            inverse_sigma: crate::discretization::max_abs(&inverse),
            gradient_inverse_sigma: grad
                .iter()
                .fold(S::zero(), |m, g| m.max((g[0] * g[0] + g[1] * g[1]).sqrt())),
        };
        Ok(Medium {
            log,
            sigma,
            bound,
            norms,
        })
    }

    /// Medium sampled from a closed-form log-medium.
    pub fn from_log_fn(grid: &SpatialGrid<S>, bound: S, u: impl Fn(Vec2<S>) -> S) -> Result<Self> {
        Self::from_log(grid, grid.sample(u), bound)
    }

    /// Spatially constant medium.
    pub fn constant(grid: &SpatialGrid<S>, sigma: S, bound: S) -> Result<Self> {
        if !(sigma > S::zero()) {
            return Err(Error::InvalidArgument("scattering coefficient must be positive".into()));
        }
        Self::from_log(grid, ScalarField::constant(grid, sigma.ln()), bound)
    }

    pub fn log(&self) -> &ScalarField<S> {
        &self.log
    }

    pub fn sigma(&self) -> &ScalarField<S> {
        &self.sigma
    }

    pub fn bound(&self) -> S {
        self.bound
    }

    pub fn norms(&self) -> AdmissibilityNorms<S> {
        self.norms
    }

    /// Strict check of all three sup-norms against the bound.
    pub fn is_admissible(&self) -> bool {
        let n = &self.norms;
        n.sigma < self.bound && n.inverse_sigma < self.bound && n.gradient_inverse_sigma < self.bound
    }

    pub(crate) fn ensure_admissible(&self) -> Result<()> {
        if self.is_admissible() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "medium outside the admissible set (bound {}, norms {:?})",
                self.bound, self.norms
            )))
        }
    }

    pub fn node_count(&self) -> usize {
        self.sigma.len()
    }
}
