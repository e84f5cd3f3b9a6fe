//! Diffusion-limit expansion of the transport solution, residual norms against
//! it, forward-map gaps, and log-log rate fits.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_map_de, solve_de_trace};
use crate::discretization::{AngularQuadrature, SpatialGrid};
use crate::error::{Error, Result};
use crate::measurement::{MeasurementSetup, QuadraticTrace};
use crate::medium::Medium;
use crate::scalar::{Real, Vec2};
use crate::transport::{forward_map_rte, AngularFlux, Lift, TransportOptions};

/// Terms of `f = f0 + eps f1 + eps^2 f2 + ...` built from a diffusion density.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTerms<S> {
    /// `f0 = rho`.
    pub density: Vec<S>,
    /// `f1 = -sigma^-1 v . grad rho`.
    pub first: AngularFlux<S>,
    /// `f2 = sigma^-1 (B - <B>)` with `B = v . grad(sigma^-1 v . grad rho)`.
    pub second: AngularFlux<S>,
    /// Largest `|<B>|` over the nodes; vanishes when `rho` solves the diffusion equation.
    pub bracket_mean: S,
    /// Largest entry of the flux Jacobian `d_a (sigma^-1 d_b rho)`.
    pub bracket_scale: S,
}

impl<S: Real> ExpansionTerms<S> {
    /// Builds the terms from any nodal density without checking consistency.
    pub fn from_density(
        grid: &SpatialGrid<S>,
        quad: &AngularQuadrature<S>,
        medium: &Medium<S>,
        density: &[S],
    ) -> Result<Self> {
        grid.check_len(density.len(), "expansion density")?;
        grid.check_len(medium.node_count(), "medium")?;
        let sigma = medium.sigma();
        let grad = grid.gradient(density)?;
        let current: [Vec<S>; 2] = [0, 1].map(|b| {
            grad.iter()
                .zip(sigma.iter())
                .map(|(g, &s)| g[b] / s)
                .collect::<Vec<S>>()
        });
        let jac: [Vec<Vec2<S>>; 2] = [grid.gradient(&current[0])?, grid.gradient(&current[1])?];

        let n = grid.node_count();
        let nq = quad.len();
        let mut first = vec![S::zero(); n * nq];
        let mut second = vec![S::zero(); n * nq];
        let mut bracket = vec![S::zero(); nq];
        let mut bracket_mean = S::zero();
        let mut bracket_scale = S::zero();
        for k in 0..n {
            // d[a][b] = d_a (sigma^-1 d_b rho)
            let d = [[jac[0][k][0], jac[1][k][0]], [jac[0][k][1], jac[1][k][1]]];
            for row in d {
                for x in row {
                    bracket_scale = bracket_scale.max(x.abs());
                }
            }
            for (q, v) in quad.directions().iter().enumerate() {
                first[q * n + k] = -(v[0] * current[0][k] + v[1] * current[1][k]);
                bracket[q] = v[0] * v[0] * d[0][0] + v[0] * v[1] * (d[0][1] + d[1][0]) + v[1] * v[1] * d[1][1];
            }
            let mean = quad.average(&bracket);
            bracket_mean = bracket_mean.max(mean.abs());
            for q in 0..nq {
                second[q * n + k] = (bracket[q] - mean) / sigma[k];
            }
        }
        let eps = S::one();
        Ok(ExpansionTerms {
            density: density.to_vec(),
            first: AngularFlux::from_values(eps, n, nq, first)?,
            second: AngularFlux::from_values(eps, n, nq, second)?,
            bracket_mean,
            bracket_scale,
        })
    }
}

/// Expansion terms for the diffusion solution with Dirichlet source `trace`.
///
/// Fails when the angular mean of the second-order bracket is more than ten
/// times a first-order discretisation allowance, which means the density does
/// not solve the diffusion equation. The allowance scales with both the
/// current and its Jacobian, since nodal differencing of the current errs by
/// `O(h)` wherever the medium varies.
pub fn expansion_terms<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    trace: &QuadraticTrace,
) -> Result<ExpansionTerms<S>> {
    let rho = solve_de_trace(grid, medium, trace)?;
    let terms = ExpansionTerms::from_density(grid, quad, medium, &rho.density)?;
    let h = grid.spacing()[0];
    let current = terms.first.values().iter().fold(S::zero(), |m, x| m.max(x.abs()));
    let allowance = h * (terms.bracket_scale + current) + S::lit(1e-9);
    if terms.bracket_mean > S::lit(10.0) * allowance {
        return Err(Error::InvalidArgument(format!(
            "second-order bracket has angular mean {} (allowance {})",
            terms.bracket_mean, allowance
        )));
    }
    Ok(terms)
}

/// `(r0, r1) = (max |f - rho|, max |f - rho - eps f1|)` over nodes and ordinates.
pub fn residual_norms<S: Real>(flux: &AngularFlux<S>, terms: &ExpansionTerms<S>) -> Result<(S, S)> {
    let n = flux.node_count();
    if terms.first.node_count() != n || terms.first.ordinate_count() != flux.ordinate_count() {
        return Err(Error::DimensionMismatch {
            expected: terms.first.values().len(),
            actual: flux.values().len(),
            context: "residual norms",
        });
    }
    let eps = flux.epsilon;
    let (mut r0, mut r1) = (S::zero(), S::zero());
    for (i, (&f, &f1)) in flux.values().iter().zip(terms.first.values()).enumerate() {
        let d = f - terms.density[i % n];
        r0 = r0.max(d.abs());
        r1 = r1.max((d - eps * f1).abs());
    }
    Ok((r0, r1))
}

/// Largest entrywise gap between the transport and diffusion forward maps.
pub fn forward_gap<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    setup: &MeasurementSetup,
    lift: Lift,
    options: &TransportOptions,
) -> Result<S> {
    let rte = forward_map_rte(grid, quad, medium, epsilon, setup, lift, options)?;
    let de = forward_map_de(grid, medium, setup)?;
    Ok(rte.max_abs_difference(&de))
}

/// Least-squares line through `(log eps, log value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub metric: String,
    /// `(epsilon, value)` pairs in the order supplied.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Points dropped because their value was zero, negative or not finite.
    pub excluded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl RateStudy {
    pub fn n_points(&self) -> usize {
        self.points.len() - self.excluded
    }

    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        self.slope >= lo && self.slope <= hi
    }
}

/// Fits `log value = slope * log eps + intercept`.
///
/// Requires strictly decreasing `eps` and at least four positive values. A
/// perfectly flat series has slope zero and `r2 = 1`.
pub fn fit_rate(metric: impl Into<String>, points: &[(f64, f64)]) -> Result<RateStudy> {
    if points.windows(2).any(|w| !(w[1].0 < w[0].0)) || points.iter().any(|p| !(p.0 > 0.0)) {
        return Err(Error::InvalidArgument(
            "rate fit needs strictly decreasing positive epsilon values".into(),
        ));
    }
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, v)| *v > 0.0 && v.is_finite())
        .map(|&(e, v)| (e.ln(), v.ln()))
        .collect();
    let excluded = points.len() - used.len();
    if used.len() < 4 {
        return Err(Error::InsufficientRateData {
            positive: used.len(),
            excluded,
        });
    }
    let n = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / n;
    let my = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = used.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = used.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy <= 1e-300 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(RateStudy {
        metric: metric.into(),
        points: points.to_vec(),
        slope,
        intercept,
        r2,
        excluded,
        fingerprint: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::Geometry;
    use approx::assert_abs_diff_eq;

    const EPS: [f64; 7] = [0.4, 0.283, 0.2, 0.141, 0.1, 0.0707, 0.05];

    #[test]
    fn exact_power_laws() {
        let pts: Vec<_> = EPS.iter().map(|&e| (e, 3.0 * e * e)).collect();
        let fit = fit_rate("quadratic", &pts).unwrap();
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r2, 1.0, epsilon = 1e-12);
        let pts: Vec<_> = EPS.iter().map(|&e| (e, 5.0 * e)).collect();
        let fit = fit_rate("linear", &pts).unwrap();
        assert_abs_diff_eq!(fit.slope, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r2, 1.0, epsilon = 1e-12);
        let pts: Vec<_> = EPS.iter().map(|&e| (e, 0.7)).collect();
        let fit = fit_rate("flat", &pts).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rate_fit_preconditions() {
        let three: Vec<_> = EPS[..3].iter().map(|&e| (e, e)).collect();
        assert!(matches!(
            fit_rate("x", &three),
            Err(Error::InsufficientRateData {
                positive: 3,
                excluded: 0
            })
        ));
        let mut pts: Vec<_> = EPS.iter().map(|&e| (e, e)).collect();
        pts[1].1 = 0.0;
        pts[2].1 = -1.0;
        let fit = fit_rate("x", &pts).unwrap();
        assert_eq!((fit.excluded, fit.n_points()), (2, 5));
        pts.swap(0, 1);
        assert!(fit_rate("x", &pts).is_err());
    }

    #[test]
    fn constant_trace_has_trivial_expansion() {
        let g = SpatialGrid::<f64>::slab(16).unwrap();
        let q = AngularQuadrature::new(Geometry::Slab, 8).unwrap();
        let m = Medium::from_log_fn(&g, 10.0, |x| 0.2 * x[0]).unwrap();
        let t = expansion_terms(&g, &q, &m, &QuadraticTrace::constant(1.25)).unwrap();
        assert!(t.density.iter().all(|r| (r - 1.25).abs() < 1e-12));
        assert!(t.first.values().iter().all(|v| v.abs() < 1e-10));
        assert!(t.second.values().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn linear_density_first_term() {
        let g = SpatialGrid::<f64>::slab(16).unwrap();
        let q = AngularQuadrature::new(Geometry::Slab, 8).unwrap();
        let m = Medium::constant(&g, 1.0, 10.0).unwrap();
        let t = expansion_terms(&g, &q, &m, &QuadraticTrace::coordinate()).unwrap();
        for (qi, v) in q.directions().iter().enumerate() {
            for k in 0..g.node_count() {
                assert_abs_diff_eq!(t.first.get(k, qi), -v[0], epsilon = 1e-12);
                assert!(t.second.get(k, qi).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn manufactured_quadratic_second_term() {
        // rho = x^2, sigma = 1: B = 2 mu^2, <B> = 2/3, f2 = 2 mu^2 - 2/3
        let g = SpatialGrid::<f64>::slab(32).unwrap();
        let q = AngularQuadrature::new(Geometry::Slab, 8).unwrap();
        let m = Medium::constant(&g, 1.0, 10.0).unwrap();
        let rho = g.sample(|x| x[0] * x[0]);
        let t = ExpansionTerms::from_density(&g, &q, &m, &rho).unwrap();
        assert_abs_diff_eq!(t.bracket_mean, 2.0 / 3.0, epsilon = 1e-10);
        for k in 0..g.node_count() {
            let f2 = t.second.at_node(k);
            assert!(q.average(&f2).abs() < 1e-12);
            for (qi, v) in q.directions().iter().enumerate() {
                assert_abs_diff_eq!(f2[qi], 2.0 * v[0] * v[0] - 2.0 / 3.0, epsilon = 1e-10);
            }
        }
        // the checked path solves for rho from the trace, so the bracket mean vanishes
        let t = expansion_terms(&g, &q, &m, &QuadraticTrace::square_of_coordinate()).unwrap();
        assert!(t.bracket_mean < 1e-8);
    }

    #[test]
    fn square_harmonic_second_term() {
        // rho = x^2 - y^2, sigma = 1: f2 = 2 (v1^2 - v2^2)
        let g = SpatialGrid::<f64>::square(16).unwrap();
        let q = AngularQuadrature::new(Geometry::Square, 8).unwrap();
        let m = Medium::constant(&g, 1.0, 10.0).unwrap();
        let t = expansion_terms(&g, &q, &m, &QuadraticTrace::saddle()).unwrap();
        for k in 0..g.node_count() {
            for (qi, v) in q.directions().iter().enumerate() {
                assert_abs_diff_eq!(t.second.get(k, qi), 2.0 * (v[0] * v[0] - v[1] * v[1]), epsilon = 1e-8);
            }
        }
        assert!(t.bracket_mean < 1e-8);
    }

    #[test]
    fn residual_norm_definitions() {
        let g = SpatialGrid::<f64>::slab(8).unwrap();
        let q = AngularQuadrature::new(Geometry::Slab, 4).unwrap();
        let m = Medium::constant(&g, 1.0, 10.0).unwrap();
        let t = expansion_terms(&g, &q, &m, &QuadraticTrace::coordinate()).unwrap();
        let eps = 0.1;
        let flat = AngularFlux::from_fn(&g, &q, eps, |_, x, _| x[0]);
        let (r0, r1) = residual_norms(&flat, &t).unwrap();
        let mu_max = q.directions().iter().map(|v| v[0].abs()).fold(0.0, f64::max);
        assert!(r0 < 1e-14);
        assert_abs_diff_eq!(r1, eps * mu_max, epsilon = 1e-12);
        let exact = AngularFlux::from_fn(&g, &q, eps, |_, x, v| x[0] - eps * v[0]);
        let (_, r1) = residual_norms(&exact, &t).unwrap();
        assert!(r1 < 1e-13);
    }
}
