//! Discrete-ordinate solver for the scaled transport equation
//! `v . grad f = (sigma / eps) (<f> - f)` with inflow boundary data.
//!
//! The scattering coupling is eliminated by solving for the scalar flux
//! `rho = <f>`: one transport sweep maps `rho` to `<f>`, and GMRES solves
//! the resulting fixed-point system `(I - K) rho = b`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::asymptotics::ExpansionTerms;
use crate::diffusion::{solve_de_adjoint, solve_de_trace, DiffusionSolution};
use crate::discretization::{AngularQuadrature, Geometry, SpatialGrid};
use crate::error::{Error, Result, SolverFailure};
use crate::linalg::{gmres, norm};
use crate::measurement::{Detector, ForwardData, MeasurementSetup, ModelTag, QuadraticTrace};
use crate::medium::Medium;
use crate::scalar::{dot, Real, Vec2};

/// `<f> - f` for the values of one node over all ordinates.
pub fn collision<S: Real>(values: &[S], quad: &AngularQuadrature<S>) -> Vec<S> {
    let mean = quad.average(values);
    values.iter().map(|&f| mean - f).collect()
}

/// Angular flux on the node-by-ordinate product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularFlux<S> {
    pub epsilon: S,
    nodes: usize,
    ordinates: usize,
    /// Ordinate-major: `values[q * nodes + node]`.
    values: Vec<S>,
}

impl<S: Real> AngularFlux<S> {
    pub fn from_values(epsilon: S, nodes: usize, ordinates: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != nodes * ordinates {
            return Err(Error::DimensionMismatch {
                expected: nodes * ordinates,
                actual: values.len(),
                context: "angular flux",
            });
        }
        Ok(AngularFlux {
            epsilon,
            nodes,
            ordinates,
            values,
        })
    }

    /// Fills the flux from a function of node position and direction.
    pub fn from_fn(
        grid: &SpatialGrid<S>,
        quad: &AngularQuadrature<S>,
        epsilon: S,
        f: impl Fn(usize, Vec2<S>, Vec2<S>) -> S,
    ) -> Self {
        let nodes = grid.node_count();
        let mut values = Vec::with_capacity(nodes * quad.len());
        for v in quad.directions() {
            for (k, &x) in grid.nodes().iter().enumerate() {
                values.push(f(k, x, *v));
            }
        }
        AngularFlux {
            epsilon,
            nodes,
            ordinates: quad.len(),
            values,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn ordinate_count(&self) -> usize {
        self.ordinates
    }

    #[inline]
    pub fn get(&self, node: usize, q: usize) -> S {
        self.values[q * self.nodes + node]
    }

    pub fn ordinate(&self, q: usize) -> &[S] {
        &self.values[q * self.nodes..(q + 1) * self.nodes]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Values of one node over all ordinates.
    pub fn at_node(&self, node: usize) -> Vec<S> {
        (0..self.ordinates).map(|q| self.get(node, q)).collect()
    }

    /// Scalar flux `<f>` at every node.
    pub fn scalar_flux(&self, quad: &AngularQuadrature<S>) -> Vec<S> {
        let mut rho = vec![S::zero(); self.nodes];
        for (q, &w) in quad.weights().iter().enumerate() {
            for (r, &f) in rho.iter_mut().zip(self.ordinate(q)) {
                *r += w * f;
            }
        }
        rho
    }

    /// Collision operator applied at every node.
    pub fn collided(&self, quad: &AngularQuadrature<S>) -> AngularFlux<S> {
        let rho = self.scalar_flux(quad);
        let mut values = self.values.clone();
        for q in 0..self.ordinates {
            for (k, v) in values[q * self.nodes..(q + 1) * self.nodes].iter_mut().enumerate() {
                *v = rho[k] - *v;
            }
        }
        AngularFlux { values, ..self.clone() }
    }

    /// Relabels ordinates `q -> reversed(q)`, i.e. `g(x, v) = f(x, -v)`.
    pub fn reversed(&self, quad: &AngularQuadrature<S>) -> AngularFlux<S> {
        let mut values = Vec::with_capacity(self.values.len());
        for q in 0..self.ordinates {
            values.extend_from_slice(self.ordinate(quad.reversed(q)));
        }
        AngularFlux { values, ..self.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Boundary values on every (boundary node, ordinate) pair; only incoming pairs are used.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticBoundaryData<S> {
    slots: usize,
    /// Ordinate-major: `values[q * slots + slot]`.
    values: Vec<S>,
}

impl<S: Real> KineticBoundaryData<S> {
    /// Evaluates `phi(slot, position, direction)` on the incoming set; outgoing entries are zero.
    pub fn from_fn(
        grid: &SpatialGrid<S>,
        quad: &AngularQuadrature<S>,
        phi: impl Fn(usize, Vec2<S>, Vec2<S>) -> S,
    ) -> Self {
        Self::from_slot_fn(grid, quad, |b, q| {
            phi(b, grid.boundary()[b].position, quad.direction(q))
        })
    }

    /// Same as [`KineticBoundaryData::from_fn`] with `phi(slot, ordinate index)`.
    pub fn from_slot_fn(grid: &SpatialGrid<S>, quad: &AngularQuadrature<S>, phi: impl Fn(usize, usize) -> S) -> Self {
        let slots = grid.boundary().len();
        let mut values = vec![S::zero(); slots * quad.len()];
        for (q, &v) in quad.directions().iter().enumerate() {
            for (b, bn) in grid.boundary().iter().enumerate() {
                if bn.is_incoming(v) {
                    values[q * slots + b] = phi(b, q);
                }
            }
        }
        KineticBoundaryData { slots, values }
    }

    /// Velocity-independent data given per boundary slot.
    pub fn isotropic(grid: &SpatialGrid<S>, quad: &AngularQuadrature<S>, values: &[S]) -> Self {
        Self::from_fn(grid, quad, |b, _, _| values[b])
    }

    #[inline]
    pub fn get(&self, slot: usize, q: usize) -> S {
        self.values[q * self.slots + slot]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    /// Smallest and largest incoming value.
    pub fn range(&self, grid: &SpatialGrid<S>, quad: &AngularQuadrature<S>) -> (S, S) {
        let mut lo = S::max_value().unwrap();
        let mut hi = S::min_value().unwrap();
        for (q, &v) in quad.directions().iter().enumerate() {
            for (b, bn) in grid.boundary().iter().enumerate() {
                if bn.is_incoming(v) {
                    lo = lo.min(self.get(b, q));
                    hi = hi.max(self.get(b, q));
                }
            }
        }
        (lo, hi)
    }
}

/// How a Dirichlet source is turned into kinetic inflow data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lift {
    /// `phi = xi`.
    Zero,
    /// `phi = xi - eps sigma^-1 v . grad xi`, with the closed-form gradient of the source.
    One,
    /// `phi = rho - eps sigma^-1 v . grad rho`, where `rho` is the diffusion
    /// solution for the same source; matches the interior expansion to first order.
    Diffusive,
    /// [`Lift::Diffusive`] plus `eps^2 f2`, matching the expansion to second order.
    Second,
}

impl Lift {
    /// Order 0 or 1 with the closed-form source gradient.
    pub fn from_order(order: u32) -> Result<Self> {
        match order {
            0 => Ok(Lift::Zero),
            1 => Ok(Lift::One),
            _ => Err(Error::InvalidArgument(format!(
                "lift order must be 0 or 1, got {order}"
            ))),
        }
    }
}

/// Kinetic inflow data for a closed-form source.
pub fn lift_boundary<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    trace: &QuadraticTrace,
    lift: Lift,
) -> Result<KineticBoundaryData<S>> {
    let sigma = medium.sigma();
    match lift {
        Lift::Zero => Ok(KineticBoundaryData::from_fn(grid, quad, |_, x, _| trace.value(x))),
        Lift::One => Ok(KineticBoundaryData::from_fn(grid, quad, |b, x, v| {
            let node = grid.boundary()[b].node;
            trace.value(x) - epsilon / sigma[node] * dot(v, trace.gradient(x))
        })),
        Lift::Diffusive | Lift::Second => {
            let sol = solve_de_trace(grid, medium, trace)?;
            let order = if lift == Lift::Second { 2 } else { 1 };
            lift_density(grid, quad, medium, epsilon, &sol.density, order)
        }
    }
}

/// Inflow data from the diffusion expansion of a nodal density:
/// `rho - eps sigma^-1 v . grad rho` for `order` 1, plus `eps^2 f2` for order 2.
pub fn lift_density<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    rho: &[S],
    order: u32,
) -> Result<KineticBoundaryData<S>> {
    let sigma = medium.sigma();
    let grads: Vec<Vec2<S>> = grid.boundary().iter().map(|b| grid.gradient_at(rho, b.node)).collect();
    let second = match order {
        1 => None,
        2 => Some(ExpansionTerms::from_density(grid, quad, medium, rho)?.second),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "density lift order must be 1 or 2, got {order}"
            )))
        }
    };
    Ok(KineticBoundaryData::from_slot_fn(grid, quad, |b, q| {
        let node = grid.boundary()[b].node;
        let first = rho[node] - epsilon / sigma[node] * dot(quad.direction(q), grads[b]);
        match &second {
            None => first,
            Some(f2) => first + epsilon * epsilon * f2.get(node, q),
        }
    }))
}

/// Spatial discretisation of the streaming operator on the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SquareScheme {
    /// Node-based corner balance ("box") scheme, second order.
    #[default]
    Box,
    /// Node-based first-order upwind differences.
    Upwind,
}

/// Outer iteration on the scalar flux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScatteringIteration {
    #[default]
    Krylov,
    /// Plain source iteration; slow for small `eps`.
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restart: usize,
    pub scheme: SquareScheme,
    pub iteration: ScatteringIteration,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions {
            tolerance: 1e-10,
            max_iterations: 10_000,
            restart: 200,
            scheme: SquareScheme::Box,
            iteration: ScatteringIteration::Krylov,
        }
    }
}

/// Iteration count and residual history of a transport solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveTranscript {
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

impl SolveTranscript {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Transport solution with its solver transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution<S> {
    pub flux: AngularFlux<S>,
    pub transcript: SolveTranscript,
}

/// Precomputed per-ordinate sweep coefficients for one medium and Knudsen number.
struct Sweeper<'a, S> {
    grid: &'a SpatialGrid<S>,
    quad: &'a AngularQuadrature<S>,
    scheme: SquareScheme,
    /// Scattering rate `sigma / eps` per cell (slab, box) or per node (upwind).
    rate: Vec<S>,
    /// Inverse of the diagonal coefficient, `[q * len + cell]`.
    inv_diag: Vec<S>,
}

impl<'a, S: Real> Sweeper<'a, S> {
    fn new(
        grid: &'a SpatialGrid<S>,
        quad: &'a AngularQuadrature<S>,
        medium: &Medium<S>,
        epsilon: S,
        scheme: SquareScheme,
    ) -> Self {
        let sigma = medium.sigma();
        let half = S::lit(0.5);
        let quarter = S::lit(0.25);
        let [nx, ny] = grid.cells();
        let [hx, hy] = grid.spacing();
        let mut rate = Vec::new();
        let mut inv_diag = Vec::new();
        match (grid.geometry(), scheme) {
            (Geometry::Slab, _) => {
                rate.extend((0..nx).map(|i| (sigma[i] + sigma[i + 1]) * half / epsilon));
                for v in quad.directions() {
                    let a = v[0].abs() / hx;
                    inv_diag.extend(rate.iter().map(|&s| S::one() / (a + s * half)));
                }
            }
            (Geometry::Square, SquareScheme::Box) => {
                for j in 0..ny {
                    for i in 0..nx {
                        let k = grid.index(i, j);
                        let r = grid.row_len();
                        let s = (sigma[k] + sigma[k + 1] + sigma[k + r] + sigma[k + r + 1]) * quarter;
                        rate.push(s / epsilon);
                    }
                }
                for v in quad.directions() {
                    let a = v[0].abs() / (hx + hx);
                    let b = v[1].abs() / (hy + hy);
                    inv_diag.extend(rate.iter().map(|&s| S::one() / (a + b + s * quarter)));
                }
            }
            (Geometry::Square, SquareScheme::Upwind) => {
                rate.extend(sigma.iter().map(|&s| s / epsilon));
                for v in quad.directions() {
                    let a = v[0].abs() / hx;
                    let b = v[1].abs() / hy;
                    inv_diag.extend(rate.iter().map(|&s| S::one() / (a + b + s)));
                }
            }
        }
        Sweeper {
            grid,
            quad,
            scheme,
            rate,
            inv_diag,
        }
    }

    /// Sweeps ordinate `q` with scattering source built from `rho` and inflow data `bc`.
    fn sweep(&self, q: usize, rho: &[S], bc: Option<&KineticBoundaryData<S>>, out: &mut [S]) {
        let v = self.quad.direction(q);
        let inflow = |slot: usize| bc.map_or(S::zero(), |d| d.get(slot, q));
        match (self.grid.geometry(), self.scheme) {
            (Geometry::Slab, _) => self.sweep_slab(q, v, rho, inflow, out),
            (Geometry::Square, SquareScheme::Box) => self.sweep_box(q, v, rho, inflow, out),
            (Geometry::Square, SquareScheme::Upwind) => self.sweep_upwind(q, v, rho, inflow, out),
        }
    }

    fn sweep_slab(&self, q: usize, v: Vec2<S>, rho: &[S], inflow: impl Fn(usize) -> S, out: &mut [S]) {
        let n = self.grid.cells()[0];
        let half = S::lit(0.5);
        let a = v[0].abs() / self.grid.spacing()[0];
        let inv = &self.inv_diag[q * n..(q + 1) * n];
        if v[0] > S::zero() {
            out[0] = inflow(0);
            for i in 0..n {
                let s = self.rate[i];
                out[i + 1] = ((a - s * half) * out[i] + s * half * (rho[i] + rho[i + 1])) * inv[i];
            }
        } else {
            out[n] = inflow(1);
            for i in (0..n).rev() {
                let s = self.rate[i];
                out[i] = ((a - s * half) * out[i + 1] + s * half * (rho[i] + rho[i + 1])) * inv[i];
            }
        }
    }

    fn inflow_edges(&self, v: Vec2<S>, inflow: impl Fn(usize) -> S, out: &mut [S]) {
        let [nx, ny] = self.grid.cells();
        let i0 = if v[0] > S::zero() { 0 } else { nx };
        let j0 = if v[1] > S::zero() { 0 } else { ny };
        for j in 0..=ny {
            let k = self.grid.index(i0, j);
            out[k] = inflow(self.grid.boundary_slot(k).unwrap());
        }
        for i in 0..=nx {
            let k = self.grid.index(i, j0);
            out[k] = inflow(self.grid.boundary_slot(k).unwrap());
        }
    }

    fn sweep_box(&self, q: usize, v: Vec2<S>, rho: &[S], inflow: impl Fn(usize) -> S, out: &mut [S]) {
        let [nx, ny] = self.grid.cells();
        let [hx, hy] = self.grid.spacing();
        let quarter = S::lit(0.25);
        let a = v[0].abs() / (hx + hx);
        let b = v[1].abs() / (hy + hy);
        let cells = nx * ny;
        let inv = &self.inv_diag[q * cells..(q + 1) * cells];
        self.inflow_edges(v, inflow, out);
        let row = self.grid.row_len() as isize;
        let east = v[0] > S::zero();
        let north = v[1] > S::zero();
        // Offsets from the downstream corner to the other three.
        let dx: isize = if east { -1 } else { 1 };
        let dy: isize = if north { -row } else { row };
        for jj in 0..ny {
            let j = if north { jj } else { ny - 1 - jj };
            let jd = if north { j + 1 } else { j };
            for ii in 0..nx {
                let i = if east { ii } else { nx - 1 - ii };
                let id = if east { i + 1 } else { i };
                let d = (id + jd * (nx + 1)) as isize;
                let x = (d + dy) as usize;
                let y = (d + dx) as usize;
                let u = (d + dx + dy) as usize;
                let d = d as usize;
                let c = i + j * nx;
                let s = self.rate[c];
                let rho_bar = (rho[u] + rho[x] + rho[y] + rho[d]) * quarter;
                let (fu, fx, fy) = (out[u], out[x], out[y]);
                let known = a * (fx - fy - fu) + b * (fy - fx - fu) + s * quarter * (fu + fx + fy);
                out[d] = (s * rho_bar - known) * inv[c];
            }
        }
    }

    fn sweep_upwind(&self, q: usize, v: Vec2<S>, rho: &[S], inflow: impl Fn(usize) -> S, out: &mut [S]) {
        let [nx, ny] = self.grid.cells();
        let [hx, hy] = self.grid.spacing();
        let a = v[0].abs() / hx;
        let b = v[1].abs() / hy;
        let n = self.grid.node_count();
        let inv = &self.inv_diag[q * n..(q + 1) * n];
        self.inflow_edges(v, inflow, out);
        let row = self.grid.row_len();
        let east = v[0] > S::zero();
        let north = v[1] > S::zero();
        for jj in 1..=ny {
            let j = if north { jj } else { ny - jj };
            for ii in 1..=nx {
                let i = if east { ii } else { nx - ii };
                let k = i + j * row;
                let up_x = if east { k - 1 } else { k + 1 };
                let up_y = if north { k - row } else { k + row };
                out[k] = (a * out[up_x] + b * out[up_y] + self.rate[k] * rho[k]) * inv[k];
            }
        }
    }

    /// `<sweep(rho, bc)>` accumulated over ordinates.
    fn mean_of_sweeps(&self, rho: &[S], bc: Option<&KineticBoundaryData<S>>, buf: &mut [S], acc: &mut [S]) {
        acc.iter_mut().for_each(|a| *a = S::zero());
        for (q, &w) in self.quad.weights().iter().enumerate() {
            self.sweep(q, rho, bc, buf);
            for (a, &f) in acc.iter_mut().zip(buf.iter()) {
                *a += w * f;
            }
        }
    }

    fn full_sweep(&self, rho: &[S], bc: &KineticBoundaryData<S>, epsilon: S) -> AngularFlux<S> {
        let n = self.grid.node_count();
        let mut values = vec![S::zero(); n * self.quad.len()];
        for q in 0..self.quad.len() {
            self.sweep(q, rho, Some(bc), &mut values[q * n..(q + 1) * n]);
        }
        AngularFlux {
            epsilon,
            nodes: n,
            ordinates: self.quad.len(),
            values,
        }
    }
}

fn validate_inputs<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    bc: &KineticBoundaryData<S>,
) -> Result<()> {
    if quad.geometry() != grid.geometry() {
        return Err(Error::InvalidArgument("quadrature and grid geometries differ".into()));
    }
    grid.check_len(medium.node_count(), "medium")?;
    if !(epsilon > S::zero() && epsilon <= S::one()) {
        return Err(Error::InvalidArgument(format!(
            "Knudsen number {epsilon} outside (0, 1]"
        )));
    }
    medium.ensure_admissible()?;
    if bc.slot_count() != grid.boundary().len() || !bc.is_finite() {
        return Err(Error::InvalidArgument(
            "kinetic boundary data malformed or not finite".into(),
        ));
    }
    Ok(())
}

/// Solves the transport problem for inflow data `bc`.
pub fn solve_rte<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    bc: &KineticBoundaryData<S>,
    options: &TransportOptions,
) -> Result<TransportSolution<S>> {
    validate_inputs(grid, quad, medium, epsilon, bc)?;
    let sweeper = Sweeper::new(grid, quad, medium, epsilon, options.scheme);
    let n = grid.node_count();
    let mut buf = vec![S::zero(); n];
    let tol = S::lit(options.tolerance).max(S::default_epsilon() * S::lit(100.0));

    // b = <sweep(0, bc)>
    let mut rhs = vec![S::zero(); n];
    let zero = vec![S::zero(); n];
    sweeper.mean_of_sweeps(&zero, Some(bc), &mut buf, &mut rhs);
    let mut rho = rhs.clone();

    let (iterations, history, converged) = match options.iteration {
        ScatteringIteration::Krylov => {
            let mut acc = vec![S::zero(); n];
            let report = gmres(
                |x, y| {
                    sweeper.mean_of_sweeps(x, None, &mut buf, &mut acc);
                    for ((yi, &xi), &ai) in y.iter_mut().zip(x).zip(&acc) {
                        *yi = xi - ai;
                    }
                },
                &rhs,
                &mut rho,
                tol,
                options.restart,
                options.max_iterations,
            );
            (report.iterations, report.residual_history, report.converged)
        }
        ScatteringIteration::Source => {
            let mut next = vec![S::zero(); n];
            let mut history = Vec::new();
            let mut converged = false;
            let mut it = 0;
            let scale = norm(&rhs).max(S::default_epsilon());
            while it < options.max_iterations {
                sweeper.mean_of_sweeps(&rho, Some(bc), &mut buf, &mut next);
                let change: Vec<S> = next.iter().zip(&rho).map(|(&a, &b)| a - b).collect();
                let rel = norm(&change) / scale;
                std::mem::swap(&mut rho, &mut next);
                it += 1;
                history.push(rel.as_f64());
                if rel <= tol {
                    converged = true;
                    break;
                }
            }
            (it, history, converged)
        }
    };
    if !converged {
        return Err(Error::TransportSolve(Box::new(SolverFailure {
            epsilon: epsilon.as_f64(),
            nodes: n,
            ordinates: quad.len(),
            iterations,
            residual_history: history,
        })));
    }
    let flux = sweeper.full_sweep(&rho, bc, epsilon);
    Ok(TransportSolution {
        flux,
        transcript: SolveTranscript {
            iterations,
            residual_history: history,
        },
    })
}

/// Adjoint transport solution with outflow data from a detector.
///
/// Solves `-v . grad g = (sigma / eps) (<g> - g)` by reversing ordinates.
/// [`Lift::Zero`] and [`Lift::One`] prescribe `g = delta` on the outgoing set;
/// [`Lift::Diffusive`] uses `delta + eps sigma^-1 v . grad rho_g` for the
/// diffusion adjoint `rho_g`, and [`Lift::Second`] adds the `eps^2` term.
pub fn solve_rte_adjoint<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    detector: &Detector<S>,
    lift: Lift,
    options: &TransportOptions,
) -> Result<TransportSolution<S>> {
    let bc = match lift {
        Lift::Zero | Lift::One => KineticBoundaryData::isotropic(grid, quad, &detector.density),
        Lift::Diffusive | Lift::Second => {
            let rho_g: DiffusionSolution<S> = solve_de_adjoint(grid, medium, detector)?;
            let order = if lift == Lift::Second { 2 } else { 1 };
            lift_density(grid, quad, medium, epsilon, &rho_g.density, order)?
        }
    };
    let sol = solve_rte(grid, quad, medium, epsilon, &bc, options)?;
    Ok(TransportSolution {
        flux: sol.flux.reversed(quad),
        transcript: sol.transcript,
    })
}

/// Outgoing current `-(1 / (C_d eps)) sum_q w_q (v_q . n) f(x, v_q)` at a boundary node.
pub fn albedo_measurement<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    flux: &AngularFlux<S>,
    node: usize,
) -> Result<S> {
    let b = grid.boundary_node(node)?;
    let current: S = quad
        .directions()
        .iter()
        .zip(quad.weights())
        .enumerate()
        .map(|(q, (&v, &w))| w * dot(v, b.normal) * flux.get(node, q))
        .sum();
    Ok(-current / (quad.second_moment() * flux.epsilon))
}

/// Detector-by-source matrix of albedo measurements.
#[allow(clippy::too_many_arguments)]
pub fn forward_map_rte<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    setup: &MeasurementSetup,
    lift: Lift,
    options: &TransportOptions,
) -> Result<ForwardData<S>> {
    let detectors = setup.resolve_detectors(grid)?;
    let mut values = DMatrix::zeros(detectors.len(), setup.traces.len());
    for (k, trace) in setup.traces.iter().enumerate() {
        let bc = lift_boundary(grid, quad, medium, epsilon, trace, lift)?;
        let sol = solve_rte(grid, quad, medium, epsilon, &bc, options)
            .map_err(|e| e.context(format!("source {k}, eps {epsilon}")))?;
        let albedo = detector_albedo(grid, quad, &sol.flux, &detectors)?;
        for (j, d) in detectors.iter().enumerate() {
            values[(j, k)] = d.apply(grid, &albedo);
        }
    }
    Ok(ForwardData {
        model: ModelTag::Transport,
        epsilon: Some(epsilon.as_f64()),
        values,
    })
}

/// Dense matrix and right-hand side of the full discrete transport system, for small grids.
///
/// Unknowns are the angular flux values `[q * nodes + node]`, the layout of
/// [`AngularFlux::values`]. Each ordinate contributes its inflow conditions and
/// one balance equation per cell (per node for the upwind scheme), with the
/// scalar flux written out as the quadrature sum.
pub fn assemble_dense_rte<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    medium: &Medium<S>,
    epsilon: S,
    bc: &KineticBoundaryData<S>,
    scheme: SquareScheme,
) -> Result<(DMatrix<S>, Vec<S>)> {
    validate_inputs(grid, quad, medium, epsilon, bc)?;
    let n = grid.node_count();
    let nq = quad.len();
    let sigma = medium.sigma();
    let w = quad.weights();
    let mut a = DMatrix::zeros(n * nq, n * nq);
    let mut rhs = vec![S::zero(); n * nq];
    let mut row = 0;
    // s (f_k - <f>_k) with weight c on row `row`
    let relax = |a: &mut DMatrix<S>, row: usize, q: usize, k: usize, c: S| {
        a[(row, q * n + k)] += c;
        for (p, &wp) in w.iter().enumerate() {
            a[(row, p * n + k)] -= c * wp;
        }
    };
    let half = S::lit(0.5);
    let quarter = S::lit(0.25);
    let [nx, ny] = grid.cells();
    let [hx, hy] = grid.spacing();
    for (q, v) in quad.directions().iter().enumerate() {
        let col = |k: usize| q * n + k;
        for b in grid.boundary() {
            if b.is_incoming(*v) {
                a[(row, col(b.node))] = S::one();
                rhs[row] = bc.get(grid.boundary_slot(b.node).unwrap(), q);
                row += 1;
            }
        }
        match (grid.geometry(), scheme) {
            (Geometry::Slab, _) => {
                for i in 0..nx {
                    let s = (sigma[i] + sigma[i + 1]) * half / epsilon;
                    let c = v[0] / hx;
                    a[(row, col(i + 1))] += c;
                    a[(row, col(i))] -= c;
                    relax(&mut a, row, q, i, s * half);
                    relax(&mut a, row, q, i + 1, s * half);
                    row += 1;
                }
            }
            (Geometry::Square, SquareScheme::Box) => {
                for j in 0..ny {
                    for i in 0..nx {
                        let c = [
                            grid.index(i, j),
                            grid.index(i + 1, j),
                            grid.index(i, j + 1),
                            grid.index(i + 1, j + 1),
                        ];
                        let s = c.iter().map(|&k| sigma[k]).fold(S::zero(), |x, y| x + y) * quarter / epsilon;
                        let (cx, cy) = (v[0] / (hx + hx), v[1] / (hy + hy));
                        for (k, sx, sy) in [
                            (c[0], -1.0, -1.0),
                            (c[1], 1.0, -1.0),
                            (c[2], -1.0, 1.0),
                            (c[3], 1.0, 1.0),
                        ] {
                            a[(row, col(k))] += cx * S::lit(sx) + cy * S::lit(sy);
                            relax(&mut a, row, q, k, s * quarter);
                        }
                        row += 1;
                    }
                }
            }
            (Geometry::Square, SquareScheme::Upwind) => {
                let r = grid.row_len();
                for k in 0..n {
                    if grid.boundary_node(k).is_ok_and(|b| b.is_incoming(*v)) {
                        continue;
                    }
                    let up_x = if v[0] > S::zero() { k - 1 } else { k + 1 };
                    let up_y = if v[1] > S::zero() { k - r } else { k + r };
                    let (cx, cy) = (v[0].abs() / hx, v[1].abs() / hy);
                    a[(row, col(k))] += cx + cy;
                    a[(row, col(up_x))] -= cx;
                    a[(row, col(up_y))] -= cy;
                    relax(&mut a, row, q, k, sigma[k] / epsilon);
                    row += 1;
                }
            }
        }
    }
    if row != n * nq {
        return Err(Error::DimensionMismatch {
            expected: n * nq,
            actual: row,
            context: "dense transport rows",
        });
    }
    Ok((a, rhs))
}

fn detector_albedo<S: Real>(
    grid: &SpatialGrid<S>,
    quad: &AngularQuadrature<S>,
    flux: &AngularFlux<S>,
    detectors: &[Detector<S>],
) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); grid.boundary().len()];
    for d in detectors {
        for b in d.support() {
            out[b] = albedo_measurement(grid, quad, flux, grid.boundary()[b].node)?;
        }
    }
    Ok(out)
}
