//! Dirichlet problem for `-div(sigma^-1 grad rho) = 0` and its Dirichlet-to-Neumann data.

use nalgebra::DMatrix;

use crate::discretization::{Geometry, ScalarField, SpatialGrid};
use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, solve_tridiagonal};
use crate::measurement::{Detector, ForwardData, MeasurementSetup, ModelTag, QuadraticTrace};
use crate::medium::Medium;
use crate::scalar::Real;

/// Discrete diffusion solution together with the boundary data it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSolution<S> {
    pub density: ScalarField<S>,
    /// Dirichlet values by boundary slot.
    pub boundary: Vec<S>,
}

impl<S: Real> DiffusionSolution<S> {
    /// Outward flux `sigma^-1 d rho/dn` at a boundary node.
    pub fn normal_flux(&self, grid: &SpatialGrid<S>, medium: &Medium<S>, node: usize) -> Result<S> {
        let b = grid.boundary_node(node)?;
        let g = grid.gradient_at(&self.density, node);
        Ok((b.normal[0] * g[0] + b.normal[1] * g[1]) / medium.sigma()[node])
    }

    /// Outward flux at every boundary slot.
    pub fn boundary_flux(&self, grid: &SpatialGrid<S>, medium: &Medium<S>) -> Vec<S> {
        grid.boundary()
            .iter()
            .map(|b| {
                let g = grid.gradient_at(&self.density, b.node);
                (b.normal[0] * g[0] + b.normal[1] * g[1]) / medium.sigma()[b.node]
            })
            .collect()
    }
}

/// Interface conductivity `1 / mean(sigma)`, the harmonic mean of the nodal `sigma^-1`.
#[inline]
fn face<S: Real>(a: S, b: S) -> S {
    (S::one() + S::one()) / (a + b)
}

fn tolerance<S: Real>() -> S {
    let floor = S::default_epsilon() * S::lit(1000.0);
    let target = S::lit(1e-12);
    if floor > target {
        floor
    } else {
        target
    }
}

/// Solves the diffusion problem with Dirichlet values given per boundary slot.
pub fn solve_de<S: Real>(grid: &SpatialGrid<S>, medium: &Medium<S>, boundary: &[S]) -> Result<DiffusionSolution<S>> {
    grid.check_len(medium.node_count(), "medium")?;
    if boundary.len() != grid.boundary().len() {
        return Err(Error::DimensionMismatch {
            expected: grid.boundary().len(),
            actual: boundary.len(),
            context: "diffusion boundary data",
        });
    }
    let sigma = medium.sigma();
    let mut rho = vec![S::zero(); grid.node_count()];
    for (b, &v) in grid.boundary().iter().zip(boundary) {
        rho[b.node] = v;
    }
    match grid.geometry() {
        Geometry::Slab => solve_slab(grid, sigma, &mut rho)?,
        Geometry::Square => solve_square(grid, sigma, &mut rho)?,
    }
    let sol = DiffusionSolution {
        density: ScalarField(rho),
        boundary: boundary.to_vec(),
    };
    debug_assert!(
        satisfies_maximum_principle(&sol),
        "diffusion maximum principle violated"
    );
    Ok(sol)
}

/// Solves with a closed-form Dirichlet source.
pub fn solve_de_trace<S: Real>(
    grid: &SpatialGrid<S>,
    medium: &Medium<S>,
    trace: &QuadraticTrace,
) -> Result<DiffusionSolution<S>> {
    let values: Vec<S> = grid.boundary().iter().map(|b| trace.value(b.position)).collect();
    solve_de(grid, medium, &values)
}

/// Diffusion problem whose Dirichlet data is the detector's boundary density.
pub fn solve_de_adjoint<S: Real>(
    grid: &SpatialGrid<S>,
    medium: &Medium<S>,
    detector: &Detector<S>,
) -> Result<DiffusionSolution<S>> {
    solve_de(grid, medium, &detector.density)
}

pub(crate) fn satisfies_maximum_principle<S: Real>(sol: &DiffusionSolution<S>) -> bool {
    let lo = sol.boundary.iter().cloned().fold(S::max_value().unwrap(), S::min);
    let hi = sol.boundary.iter().cloned().fold(S::min_value().unwrap(), S::max);
    let tol = S::lit(1e-8) * (S::one() + hi.abs().max(lo.abs())) + tolerance::<S>().sqrt();
    sol.density.iter().all(|&r| r >= lo - tol && r <= hi + tol)
}

fn solve_slab<S: Real>(grid: &SpatialGrid<S>, sigma: &[S], rho: &mut [S]) -> Result<()> {
    let n = grid.cells()[0];
    let interior = n - 1;
    let mut lower = vec![S::zero(); interior];
    let mut diag = vec![S::zero(); interior];
    let mut upper = vec![S::zero(); interior];
    let mut rhs = vec![S::zero(); interior];
    for r in 0..interior {
        let i = r + 1;
        let west = face(sigma[i - 1], sigma[i]);
        let east = face(sigma[i], sigma[i + 1]);
        diag[r] = west + east;
        if i == 1 {
            rhs[r] += west * rho[0];
        } else {
            lower[r] = -west;
        }
        if i == n - 1 {
            rhs[r] += east * rho[n];
        } else {
            upper[r] = -east;
        }
    }
    solve_tridiagonal(&lower, &diag, &upper, &mut rhs)
        .ok_or_else(|| Error::DiffusionSolve("zero pivot in tridiagonal solve".into()))?;
    rho[1..n].copy_from_slice(&rhs);
    Ok(())
}

fn solve_square<S: Real>(grid: &SpatialGrid<S>, sigma: &[S], rho: &mut [S]) -> Result<()> {
    let [nx, ny] = grid.cells();
    let [hx, hy] = grid.spacing();
    let (ax, ay) = (S::one() / (hx * hx), S::one() / (hy * hy));
    let row = nx + 1;
    let (mx, my) = (nx - 1, ny - 1);
    let interior = |i: usize, j: usize| (i - 1) + (j - 1) * mx;

    // Face conductivities and the Dirichlet contribution to the right-hand side.
    let mut east = vec![S::zero(); mx * my];
    let mut north = vec![S::zero(); mx * my];
    let mut diag = vec![S::zero(); mx * my];
    let mut rhs = vec![S::zero(); mx * my];
    for j in 1..ny {
        for i in 1..nx {
            let k = grid.index(i, j);
            let r = interior(i, j);
            let fw = ax * face(sigma[k - 1], sigma[k]);
            let fe = ax * face(sigma[k], sigma[k + 1]);
            let fs = ay * face(sigma[k - row], sigma[k]);
            let fn_ = ay * face(sigma[k], sigma[k + row]);
            diag[r] = fw + fe + fs + fn_;
            east[r] = fe;
            north[r] = fn_;
            if i == 1 {
                rhs[r] += fw * rho[k - 1];
            }
            if i == nx - 1 {
                rhs[r] += fe * rho[k + 1];
            }
            if j == 1 {
                rhs[r] += fs * rho[k - row];
            }
            if j == ny - 1 {
                rhs[r] += fn_ * rho[k + row];
            }
        }
    }

    let apply = |x: &[S], y: &mut [S]| {
        for j in 0..my {
            for i in 0..mx {
                let r = i + j * mx;
                let mut acc = diag[r] * x[r];
                if i > 0 {
                    acc -= east[r - 1] * x[r - 1];
                }
                if i + 1 < mx {
                    acc -= east[r] * x[r + 1];
                }
                if j > 0 {
                    acc -= north[r - mx] * x[r - mx];
                }
                if j + 1 < my {
                    acc -= north[r] * x[r + mx];
                }
                y[r] = acc;
            }
        }
    };
    // Start from the bilinear blend of the boundary values.
    let mut x = vec![S::zero(); mx * my];
    for j in 1..ny {
        for i in 1..nx {
            let (s, t) = (S::of(i) / S::of(nx), S::of(j) / S::of(ny));
            let (w, e) = (rho[grid.index(0, j)], rho[grid.index(nx, j)]);
            let (so, no) = (rho[grid.index(i, 0)], rho[grid.index(i, ny)]);
            x[interior(i, j)] = ((S::one() - s) * w + s * e + (S::one() - t) * so + t * no) * S::lit(0.5);
        }
    }
    let max_iter = 20 * (mx * my).max(100);
    let report = conjugate_gradient(apply, &rhs, &mut x, tolerance::<S>(), max_iter);
    if !report.converged {
        return Err(Error::DiffusionSolve(format!(
            "conjugate gradients stalled after {} iterations at relative residual {:.3e}",
            report.iterations,
            report.final_residual()
        )));
    }
    for j in 1..ny {
        for i in 1..nx {
            rho[grid.index(i, j)] = x[interior(i, j)];
        }
    }
    Ok(())
}

/// Dense matrix and right-hand side of the interior system, for small grids.
///
/// Rows are interior nodes in grid order.
pub fn assemble_dense<S: Real>(
    grid: &SpatialGrid<S>,
    medium: &Medium<S>,
    boundary: &[S],
) -> (DMatrix<S>, Vec<S>, Vec<usize>) {
    let sigma = medium.sigma();
    let unknowns: Vec<usize> = (0..grid.node_count()).filter(|&k| !grid.is_boundary(k)).collect();
    let mut pos = vec![usize::MAX; grid.node_count()];
    for (r, &k) in unknowns.iter().enumerate() {
        pos[k] = r;
    }
    let mut value = vec![S::zero(); grid.node_count()];
    for (b, &v) in grid.boundary().iter().zip(boundary) {
        value[b.node] = v;
    }
    let n = unknowns.len();
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = vec![S::zero(); n];
    let row = grid.row_len();
    let [hx, hy] = grid.spacing();
    for (r, &k) in unknowns.iter().enumerate() {
        let mut neighbours = vec![(k - 1, S::one() / (hx * hx)), (k + 1, S::one() / (hx * hx))];
        if grid.geometry() == Geometry::Square {
            neighbours.push((k - row, S::one() / (hy * hy)));
            neighbours.push((k + row, S::one() / (hy * hy)));
        }
        for (m, scale) in neighbours {
            let c = scale * face(sigma[k], sigma[m]);
            a[(r, r)] += c;
            if grid.is_boundary(m) {
                rhs[r] += c * value[m];
            } else {
                a[(r, pos[m])] -= c;
            }
        }
    }
    (a, rhs, unknowns)
}

/// DtN measurement `sigma^-1 d rho/dn` at a boundary node.
pub fn dtn_measurement<S: Real>(
    grid: &SpatialGrid<S>,
    medium: &Medium<S>,
    solution: &DiffusionSolution<S>,
    node: usize,
) -> Result<S> {
    solution.normal_flux(grid, medium, node)
}

/// Detector-by-source matrix of DtN measurements.
pub fn forward_map_de<S: Real>(
    grid: &SpatialGrid<S>,
    medium: &Medium<S>,
    setup: &MeasurementSetup,
) -> Result<ForwardData<S>> {
    let detectors = setup.resolve_detectors(grid)?;
    let mut values = DMatrix::zeros(detectors.len(), setup.traces.len());
    for (k, trace) in setup.traces.iter().enumerate() {
        let sol = solve_de_trace(grid, medium, trace).map_err(|e| e.context(format!("source {k}")))?;
        let flux = measured_flux(grid, medium, &sol, &detectors);
        for (j, d) in detectors.iter().enumerate() {
            values[(j, k)] = d.apply(grid, &flux);
        }
    }
    Ok(ForwardData {
        model: ModelTag::Diffusion,
        epsilon: None,
        values,
    })
}

/// Boundary flux at the slots any detector can see; zero elsewhere.
fn measured_flux<S: Real>(
    grid: &SpatialGrid<S>,
    medium: &Medium<S>,
    sol: &DiffusionSolution<S>,
    detectors: &[Detector<S>],
) -> Vec<S> {
    let mut flux = vec![S::zero(); grid.boundary().len()];
    let mut seen = vec![false; flux.len()];
    for d in detectors {
        for b in d.support() {
            if !seen[b] {
                seen[b] = true;
                let node = grid.boundary()[b].node;
                flux[b] = sol.normal_flux(grid, medium, node).expect("boundary slot");
            }
        }
    }
    flux
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(grid: &SpatialGrid<f64>) -> Medium<f64> {
        Medium::constant(grid, 1.0, 10.0).unwrap()
    }

    #[test]
    fn constant_trace_gives_constant_solution() {
        for grid in [
            SpatialGrid::<f64>::slab(16).unwrap(),
            SpatialGrid::<f64>::square(12).unwrap(),
        ] {
            let med = Medium::from_log_fn(&grid, 10.0, |x| 0.3 * x[0] - 0.2 * x[1]).unwrap();
            let sol = solve_de_trace(&grid, &med, &QuadraticTrace::constant(2.5)).unwrap();
            assert!(sol.density.iter().all(|&r| (r - 2.5).abs() < 1e-10));
            for b in grid.boundary() {
                assert!(dtn_measurement(&grid, &med, &sol, b.node).unwrap().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_trace_on_slab() {
        let grid = SpatialGrid::<f64>::slab(8).unwrap();
        let med = unit(&grid);
        let sol = solve_de_trace(&grid, &med, &QuadraticTrace::coordinate()).unwrap();
        for (x, r) in grid.nodes().iter().zip(sol.density.iter()) {
            assert_abs_diff_eq!(*r, x[0], epsilon = 1e-14);
        }
        assert_abs_diff_eq!(dtn_measurement(&grid, &med, &sol, 0).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dtn_measurement(&grid, &med, &sol, 8).unwrap(), 1.0, epsilon = 1e-12);
        assert!(dtn_measurement(&grid, &med, &sol, 4).is_err());
    }

    #[test]
    fn variable_medium_matches_closed_form() {
        // sigma^-1 rho' constant gives rho = int_0^x sigma / int_0^1 sigma
        let err = |n: usize, log_sigma: fn(f64) -> f64, exact: fn(f64) -> f64| {
            let grid = SpatialGrid::<f64>::slab(n).unwrap();
            let med = Medium::from_log_fn(&grid, 10.0, |x| log_sigma(x[0])).unwrap();
            let sol = solve_de_trace(&grid, &med, &QuadraticTrace::coordinate()).unwrap();
            grid.nodes()
                .iter()
                .zip(sol.density.iter())
                .map(|(x, r)| (r - exact(x[0])).abs())
                .fold(0.0, f64::max)
        };
        let affine = |x: f64| (1.0 + x).ln();
        let affine_exact = |x: f64| (x + 0.5 * x * x) / 1.5;
        for n in [8, 16, 64] {
            assert!(err(n, affine, affine_exact) <= 1.0 / (n * n) as f64);
        }
        // sigma = 1 + x^2: rho = (x + x^3/3) / (4/3)
        let quad = |x: f64| (1.0 + x * x).ln();
        let quad_exact = |x: f64| (x + x * x * x / 3.0) * 0.75;
        let e = [
            err(16, quad, quad_exact),
            err(32, quad, quad_exact),
            err(64, quad, quad_exact),
        ];
        assert!(e[0] > 0.0 && e[0] < 1e-3);
        assert!((e[0] / e[1]).log2() >= 1.9 && (e[1] / e[2]).log2() >= 1.9, "{e:?}");
    }

    #[test]
    fn square_linear_field_fluxes() {
        let grid = SpatialGrid::<f64>::square(8).unwrap();
        let med = unit(&grid);
        let sol = solve_de_trace(&grid, &med, &QuadraticTrace::coordinate()).unwrap();
        for (x, r) in grid.nodes().iter().zip(sol.density.iter()) {
            assert_abs_diff_eq!(*r, x[0], epsilon = 1e-10);
        }
        for (b, flux) in grid.boundary().iter().zip(sol.boundary_flux(&grid, &med)) {
            if b.faces.len() == 2 {
                continue;
            }
            let expected = b.normal[0];
            assert_abs_diff_eq!(flux, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn square_matches_dense_assembly() {
        let grid = SpatialGrid::<f64>::square(6).unwrap();
        let med = Medium::from_log_fn(&grid, 10.0, |x| 0.4 * (3.0 * x[0]).sin() * x[1]).unwrap();
        let bc: Vec<f64> = grid
            .boundary()
            .iter()
            .map(|b| (b.position[0] - 2.0 * b.position[1]).cos())
            .collect();
        let sol = solve_de(&grid, &med, &bc).unwrap();
        let (a, rhs, unknowns) = assemble_dense(&grid, &med, &bc);
        let x = a.lu().solve(&nalgebra::DVector::from_vec(rhs)).unwrap();
        for (r, &k) in unknowns.iter().enumerate() {
            assert_abs_diff_eq!(sol.density[k], x[r], epsilon = 1e-10);
        }
    }

    #[test]
    fn adjoint_with_endpoint_delta() {
        let grid = SpatialGrid::<f64>::slab(16).unwrap();
        let med = unit(&grid);
        let setup = MeasurementSetup::slab_reference();
        let dets = setup.resolve_detectors(&grid).unwrap();
        let right = solve_de_adjoint(&grid, &med, &dets[1]).unwrap();
        let left = solve_de_adjoint(&grid, &med, &dets[0]).unwrap();
        for (k, x) in grid.nodes().iter().enumerate() {
            assert_abs_diff_eq!(right.density[k], x[0], epsilon = 1e-13);
            assert_abs_diff_eq!(left.density[k], 1.0 - x[0], epsilon = 1e-13);
        }
    }

    #[test]
    fn slab_forward_map_columns() {
        let grid = SpatialGrid::<f64>::slab(32).unwrap();
        let med = unit(&grid);
        let mut setup = MeasurementSetup::slab_reference();
        let data = forward_map_de(&grid, &med, &setup).unwrap();
        assert_eq!(data.model, ModelTag::Diffusion);
        assert_abs_diff_eq!(data.values[(0, 0)], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(data.values[(1, 0)], 1.0, epsilon = 1e-12);
        setup.traces = vec![QuadraticTrace::constant(1.0), QuadraticTrace::constant(-3.0)];
        let zero = forward_map_de(&grid, &med, &setup).unwrap();
        assert!(zero.values.amax() < 1e-10);
    }

    #[test]
    fn boundary_flux_balances() {
        let grid = SpatialGrid::<f64>::square(32).unwrap();
        let med = Medium::from_log_fn(&grid, 10.0, |x| 0.3 * (2.0 * x[0]).cos() + 0.2 * x[1]).unwrap();
        let sol = solve_de_trace(&grid, &med, &QuadraticTrace::saddle()).unwrap();
        let flux = sol.boundary_flux(&grid, &med);
        let total: f64 = grid.boundary().iter().zip(&flux).map(|(b, f)| b.weight * f).sum();
        let scale: f64 = grid.boundary().iter().zip(&flux).map(|(b, f)| b.weight * f.abs()).sum();
        assert!(total.abs() < 2e-2 * scale, "net flux {total} vs {scale}");
    }
}
