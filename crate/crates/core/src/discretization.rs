//! Uniform spatial grids, discrete-ordinate quadratures and nodal difference operators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Real, Vec2};

/// Domain shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// The interval `[0, 1]`.
    Slab,
    /// The unit square `[0, 1]^2`.
    Square,
}

impl Geometry {
    pub fn dimension(self) -> usize {
        match self {
            Geometry::Slab => 1,
            Geometry::Square => 2,
        }
    }
}

/// A boundary node of a [`SpatialGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryNode<S> {
    pub node: usize,
    pub position: Vec2<S>,
    /// Outward unit normal. At square corners this is the diagonal bisector.
    pub normal: Vec2<S>,
    /// Share of the boundary measure carried by this node.
    pub weight: S,
    /// Outward normals of the faces meeting at the node (two at corners).
    pub faces: Vec<Vec2<S>>,
}

impl<S: Real> BoundaryNode<S> {
    /// True when `v` enters the domain through at least one adjacent face.
    pub fn is_incoming(&self, v: Vec2<S>) -> bool {
        self.faces.iter().any(|n| crate::scalar::dot(*n, v) < S::zero())
    }
}

/// Uniform node-centred grid on the slab or the unit square.
///
/// Nodes are numbered `i + j * (nx + 1)`; boundary nodes run counter-clockwise
/// from the origin on the square.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid<S> {
    geometry: Geometry,
    cells: [usize; 2],
    spacing: Vec2<S>,
    nodes: Vec<Vec2<S>>,
    boundary: Vec<BoundaryNode<S>>,
    boundary_slot: Vec<Option<usize>>,
}

/// Smallest resolution accepted per axis.
pub const MIN_RESOLUTION: usize = 4;

impl<S: Real> SpatialGrid<S> {
    /// Slab grid with `nx` cells.
    pub fn slab(nx: usize) -> Result<Self> {
        Self::build(Geometry::Slab, &[nx])
    }

    /// Square grid with `n` cells per axis.
    pub fn square(n: usize) -> Result<Self> {
        Self::build(Geometry::Square, &[n, n])
    }

    /// Builds a grid from per-axis cell counts. A single count on the square
    /// is used for both axes.
    pub fn build(geometry: Geometry, resolution: &[usize]) -> Result<Self> {
        let cells = match (geometry, resolution) {
            (Geometry::Slab, [nx]) => [*nx, 0],
            (Geometry::Square, [n]) => [*n, *n],
            (Geometry::Square, [nx, ny]) => [*nx, *ny],
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{geometry:?} grid takes {} resolution value(s), got {}",
                    geometry.dimension(),
                    resolution.len()
                )))
            }
        };
        for &n in &cells[..geometry.dimension()] {
            if n < MIN_RESOLUTION {
                return Err(Error::InvalidArgument(format!(
                    "resolution {n} below minimum {MIN_RESOLUTION}"
                )));
            }
        }
        match geometry {
            Geometry::Slab => Ok(Self::build_slab(cells[0])),
            Geometry::Square => Ok(Self::build_square(cells[0], cells[1])),
        }
    }

    fn build_slab(nx: usize) -> Self {
        let h = S::one() / S::of(nx);
        let nodes: Vec<Vec2<S>> = (0..=nx)
            .map(|i| [if i == nx { S::one() } else { S::of(i) * h }, S::zero()])
            .collect();
        let mk = |node: usize, sign: f64| BoundaryNode {
            node,
            position: nodes[node],
            normal: [S::lit(sign), S::zero()],
            weight: S::one(),
            faces: vec![[S::lit(sign), S::zero()]],
        };
        let boundary = vec![mk(0, -1.0), mk(nx, 1.0)];
        let mut boundary_slot = vec![None; nx + 1];
        boundary_slot[0] = Some(0);
        boundary_slot[nx] = Some(1);
        SpatialGrid {
            geometry: Geometry::Slab,
            cells: [nx, 0],
            spacing: [h, S::zero()],
            nodes,
            boundary,
            boundary_slot,
        }
    }

    fn build_square(nx: usize, ny: usize) -> Self {
        let hx = S::one() / S::of(nx);
        let hy = S::one() / S::of(ny);
        let coord = |k: usize, n: usize, h: S| if k == n { S::one() } else { S::of(k) * h };
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([coord(i, nx, hx), coord(j, ny, hy)]);
            }
        }
        let idx = |i: usize, j: usize| i + j * (nx + 1);

        let mut walk: Vec<(usize, usize)> = Vec::with_capacity(2 * (nx + ny));
        walk.extend((0..=nx).map(|i| (i, 0)));
        walk.extend((1..=ny).map(|j| (nx, j)));
        walk.extend((0..nx).rev().map(|i| (i, ny)));
        walk.extend((1..ny).rev().map(|j| (0, j)));

        let half = S::lit(0.5);
        let inv_sqrt2 = S::lit(std::f64::consts::FRAC_1_SQRT_2);
        let mut boundary = Vec::with_capacity(walk.len());
        let mut boundary_slot = vec![None; nodes.len()];
        for (slot, &(i, j)) in walk.iter().enumerate() {
            let mut faces = Vec::with_capacity(2);
            let mut weight = S::zero();
            if i == 0 {
                faces.push([-S::one(), S::zero()]);
                weight += half * hy;
            }
            if i == nx {
                faces.push([S::one(), S::zero()]);
                weight += half * hy;
            }
            if j == 0 {
                faces.push([S::zero(), -S::one()]);
                weight += half * hx;
            }
            if j == ny {
                faces.push([S::zero(), S::one()]);
                weight += half * hx;
            }
            // Edge nodes receive half a spacing from each side.
            if faces.len() == 1 {
                weight += weight;
            }
            let normal = if faces.len() == 2 {
                [
                    (faces[0][0] + faces[1][0]) * inv_sqrt2,
                    (faces[0][1] + faces[1][1]) * inv_sqrt2,
                ]
            } else {
                faces[0]
            };
            let node = idx(i, j);
            boundary_slot[node] = Some(slot);
            boundary.push(BoundaryNode {
                node,
                position: nodes[node],
                normal,
                weight,
                faces,
            });
        }
        SpatialGrid {
            geometry: Geometry::Square,
            cells: [nx, ny],
            spacing: [hx, hy],
            nodes,
            boundary,
            boundary_slot,
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn dimension(&self) -> usize {
        self.geometry.dimension()
    }

    /// Cell counts per axis; the second entry is zero on the slab.
    pub fn cells(&self) -> [usize; 2] {
        self.cells
    }

    pub fn spacing(&self) -> Vec2<S> {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes along the first axis (`nx + 1`).
    pub fn row_len(&self) -> usize {
        self.cells[0] + 1
    }

    pub fn nodes(&self) -> &[Vec2<S>] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> Vec2<S> {
        self.nodes[index]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + j * (self.cells[0] + 1)
    }

    pub fn boundary(&self) -> &[BoundaryNode<S>] {
        &self.boundary
    }

    /// Position of `node` in [`Self::boundary`], if it lies on the boundary.
    pub fn boundary_slot(&self, node: usize) -> Option<usize> {
        self.boundary_slot.get(node).copied().flatten()
    }

    pub fn boundary_node(&self, node: usize) -> Result<&BoundaryNode<S>> {
        self.boundary_slot(node)
            .map(|slot| &self.boundary[slot])
            .ok_or(Error::NotOnBoundary(node))
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_slot(node).is_some()
    }

    /// Total boundary measure: 2 on the slab, 4 on the square.
    pub fn boundary_measure(&self) -> S {
        self.boundary.iter().map(|b| b.weight).sum()
    }

    /// Boundary node closest to `point`.
    pub fn nearest_boundary_node(&self, point: Vec2<S>) -> usize {
        let mut best = (S::max_value().unwrap_or_else(S::one), 0);
        for b in &self.boundary {
            let dx = b.position[0] - point[0];
            let dy = b.position[1] - point[1];
            let d = dx * dx + dy * dy;
            if d < best.0 {
                best = (d, b.node);
            }
        }
        best.1
    }

    /// Samples a closed-form function at every node.
    pub fn sample(&self, f: impl Fn(Vec2<S>) -> S) -> ScalarField<S> {
        ScalarField(self.nodes.iter().map(|&x| f(x)).collect())
    }

    /// Trapezoidal quadrature weights over the domain.
    pub fn volume_weights(&self) -> Vec<S> {
        let axis = |n: usize, h: S| -> Vec<S> {
            (0..=n)
                .map(|k| if k == 0 || k == n { h * S::lit(0.5) } else { h })
                .collect()
        };
        let wx = axis(self.cells[0], self.spacing[0]);
        match self.geometry {
            Geometry::Slab => wx,
            Geometry::Square => {
                let wy = axis(self.cells[1], self.spacing[1]);
                let mut w = Vec::with_capacity(self.nodes.len());
                for &b in &wy {
                    for &a in &wx {
                        w.push(a * b);
                    }
                }
                w
            }
        }
    }

    /// Trapezoidal integral of nodal values over the domain.
    pub fn integrate(&self, values: &[S]) -> S {
        assert_eq!(values.len(), self.nodes.len());
        self.volume_weights().iter().zip(values).map(|(&w, &v)| w * v).sum()
    }

    pub(crate) fn check_len(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.nodes.len(),
                actual: len,
                context,
            });
        }
        Ok(())
    }

    /// Nodal gradient: second-order central differences inside, three-point
    /// one-sided differences on the boundary.
    pub fn gradient(&self, field: &[S]) -> Result<Vec<Vec2<S>>> {
        self.check_len(field.len(), "gradient")?;
        Ok((0..field.len()).map(|k| self.gradient_at(field, k)).collect())
    }

    /// Gradient stencil of [`Self::gradient`] at a single node.
    pub fn gradient_at(&self, field: &[S], k: usize) -> Vec2<S> {
        let row = self.row_len();
        let i = k % row;
        let dx = axis_derivative(field, k, i, self.cells[0], 1, self.spacing[0]);
        let dy = if self.geometry == Geometry::Square {
            axis_derivative(field, k, k / row, self.cells[1], row, self.spacing[1])
        } else {
            S::zero()
        };
        [dx, dy]
    }
}

#[inline]
fn axis_derivative<S: Real>(f: &[S], k: usize, pos: usize, n: usize, stride: usize, h: S) -> S {
    let two_h = h + h;
    let (three, four) = (S::lit(3.0), S::lit(4.0));
    if pos == 0 {
        (-three * f[k] + four * f[k + stride] - f[k + 2 * stride]) / two_h
    } else if pos == n {
        (three * f[k] - four * f[k - stride] + f[k - 2 * stride]) / two_h
    } else {
        (f[k + stride] - f[k - stride]) / two_h
    }
}

/// Nodal values of a scalar quantity on a [`SpatialGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarField<S>(pub Vec<S>);

impl<S: Real> ScalarField<S> {
    pub fn constant(grid: &SpatialGrid<S>, value: S) -> Self {
        ScalarField(vec![value; grid.node_count()])
    }

    pub fn values(&self) -> &[S] {
        &self.0
    }

    pub fn max_abs(&self) -> S {
        max_abs(&self.0)
    }
}

impl<S> std::ops::Deref for ScalarField<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        &self.0
    }
}

pub(crate) fn max_abs<S: Real>(values: &[S]) -> S {
    values.iter().fold(S::zero(), |m, v| m.max(v.abs()))
}

/// Discrete-ordinate set with weights normalised to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularQuadrature<S> {
    geometry: Geometry,
    directions: Vec<Vec2<S>>,
    weights: Vec<S>,
    second_moment: S,
    reversed: Vec<usize>,
}

/// Angular second moment on the sphere; the three-dimensional quadrature is not provided.
pub const SPHERE_SECOND_MOMENT: f64 = 1.0 / 3.0;

impl<S: Real> AngularQuadrature<S> {
    /// Half-weighted Gauss-Legendre on the slab, equispaced half-offset angles on the square.
    pub fn new(geometry: Geometry, count: usize) -> Result<Self> {
        if !count.is_multiple_of(2) || count < 4 {
            return Err(Error::InvalidArgument(format!(
                "ordinate count must be even and at least 4, got {count}"
            )));
        }
        let (directions, weights, reversed): (Vec<Vec2<S>>, Vec<S>, Vec<usize>) = match geometry {
            Geometry::Slab => {
                let (mu, w) = gauss_legendre(count);
                (
                    mu.iter().map(|&m| [S::lit(m), S::zero()]).collect(),
                    w.iter().map(|&w| S::lit(0.5 * w)).collect(),
                    (0..count).map(|q| count - 1 - q).collect(),
                )
            }
            Geometry::Square => {
                let w = S::one() / S::of(count);
                let dirs = (0..count)
                    .map(|q| {
                        let theta = std::f64::consts::TAU * (q as f64 + 0.5) / count as f64;
                        [S::lit(theta.cos()), S::lit(theta.sin())]
                    })
                    .collect();
                (
                    dirs,
                    vec![w; count],
                    (0..count).map(|q| (q + count / 2) % count).collect(),
                )
            }
        };
        let second_moment = directions.iter().zip(&weights).map(|(v, &w)| w * v[0] * v[0]).sum();
        Ok(AngularQuadrature {
            geometry,
            directions,
            weights,
            second_moment,
            reversed,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn directions(&self) -> &[Vec2<S>] {
        &self.directions
    }

    pub fn direction(&self, q: usize) -> Vec2<S> {
        self.directions[q]
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    /// `C_d = <(v . e_i)^2>`.
    pub fn second_moment(&self) -> S {
        self.second_moment
    }

    /// Index of the ordinate pointing opposite to `q`.
    pub fn reversed(&self, q: usize) -> usize {
        self.reversed[q]
    }

    /// Angular average `sum_q w_q f_q`.
    pub fn average(&self, values: &[S]) -> S {
        debug_assert_eq!(values.len(), self.weights.len());
        self.weights.iter().zip(values).map(|(&w, &f)| w * f).sum()
    }
}

/// Gauss-Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn slab_grid_layout() {
        let g = SpatialGrid::<f64>::slab(8).unwrap();
        assert_eq!(g.node_count(), 9);
        for (k, x) in g.nodes().iter().enumerate() {
            assert_eq!(x[0], k as f64 / 8.0);
        }
        let b = g.boundary();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].node, b[0].normal[0]), (0, -1.0));
        assert_eq!((b[1].node, b[1].normal[0]), (8, 1.0));
        assert_abs_diff_eq!(g.boundary_measure(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn square_grid_counts() {
        let g = SpatialGrid::<f64>::square(8).unwrap();
        assert_eq!(g.node_count(), 81);
        assert_eq!(g.boundary().len(), 32);
        assert_abs_diff_eq!(g.boundary_measure(), 4.0, epsilon = 1e-12);
        for b in g.boundary() {
            let n = b.normal;
            assert_abs_diff_eq!(n[0] * n[0] + n[1] * n[1], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn coarse_grids_are_rejected() {
        assert!(SpatialGrid::<f64>::slab(2).is_err());
        assert!(SpatialGrid::<f64>::square(3).is_err());
        assert!(SpatialGrid::<f64>::build(Geometry::Slab, &[8, 8]).is_err());
    }

    #[test]
    fn inward_offset_of_boundary_nodes_is_inside() {
        for grid in [SpatialGrid::<f64>::slab(6).unwrap(), SpatialGrid::square(6).unwrap()] {
            let h = grid.spacing()[0];
            for b in grid.boundary() {
                for d in 0..grid.dimension() {
                    let x = b.position[d] - 0.5 * h * b.normal[d];
                    assert!(x > 0.0 && x < 1.0);
                }
            }
        }
    }

    #[test]
    fn slab_quadrature_moments() {
        let q = AngularQuadrature::<f64>::new(Geometry::Slab, 16).unwrap();
        assert_abs_diff_eq!(q.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.second_moment(), 1.0 / 3.0, epsilon = 1e-12);
        let first: f64 = q.directions().iter().zip(q.weights()).map(|(v, w)| v[0] * w).sum();
        assert!(first.abs() <= 1e-12);
        // <mu^k> = 1/(k+1) for even k, exact up to degree 2N-1
        for k in 0..32 {
            let m: f64 = q
                .directions()
                .iter()
                .zip(q.weights())
                .map(|(v, w)| w * v[0].powi(k))
                .sum();
            let exact = if k % 2 == 0 { 1.0 / (k as f64 + 1.0) } else { 0.0 };
            assert_abs_diff_eq!(m, exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn square_quadrature_moments() {
        let q = AngularQuadrature::<f64>::new(Geometry::Square, 16).unwrap();
        assert_abs_diff_eq!(q.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.second_moment(), 0.5, epsilon = 1e-12);
        let sy: f64 = q
            .directions()
            .iter()
            .zip(q.weights())
            .map(|(v, w)| w * v[1] * v[1])
            .sum();
        assert_abs_diff_eq!(sy, 0.5, epsilon = 1e-12);
        for d in 0..2 {
            let m: f64 = q.directions().iter().zip(q.weights()).map(|(v, w)| w * v[d]).sum();
            assert!(m.abs() <= 1e-12);
        }
        for v in q.directions() {
            assert!(v[0].abs() > 1e-3 && v[1].abs() > 1e-3);
        }
    }

    #[test]
    fn odd_ordinate_counts_are_rejected() {
        assert!(AngularQuadrature::<f64>::new(Geometry::Slab, 5).is_err());
        assert!(AngularQuadrature::<f64>::new(Geometry::Square, 2).is_err());
    }

    #[test]
    fn reversed_ordinates_point_backwards() {
        for geometry in [Geometry::Slab, Geometry::Square] {
            let q = AngularQuadrature::<f64>::new(geometry, 8).unwrap();
            for k in 0..q.len() {
                let (a, b) = (q.direction(k), q.direction(q.reversed(k)));
                assert_abs_diff_eq!(a[0] + b[0], 0.0, epsilon = 1e-14);
                assert_abs_diff_eq!(a[1] + b[1], 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gradient_of_linear_and_constant_fields() {
        let g = SpatialGrid::<f64>::slab(16).unwrap();
        let lin = g.gradient(&g.sample(|x| x[0])).unwrap();
        assert!(lin.iter().all(|d| (d[0] - 1.0).abs() < 1e-12));
        let flat = g.gradient(&g.sample(|_| 3.5)).unwrap();
        assert!(flat.iter().all(|d| d[0] == 0.0));
    }

    #[test]
    fn gradient_of_quadratic_is_exact_inside() {
        let g = SpatialGrid::<f64>::slab(64).unwrap();
        let d = g.gradient(&g.sample(|x| x[0] * x[0])).unwrap();
        for (k, x) in g.nodes().iter().enumerate() {
            assert!((d[k][0] - 2.0 * x[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_converges_at_second_order() {
        let err = |n: usize| {
            let g = SpatialGrid::<f64>::square(n).unwrap();
            let f = g.sample(|x| (2.0 * x[0]).sin() * (1.5 * x[1]).exp());
            let d = g.gradient(&f).unwrap();
            g.nodes()
                .iter()
                .zip(&d)
                .map(|(x, d)| {
                    let ex = [
                        2.0 * (2.0 * x[0]).cos() * (1.5 * x[1]).exp(),
                        1.5 * (2.0 * x[0]).sin() * (1.5 * x[1]).exp(),
                    ];
                    (d[0] - ex[0]).abs().max((d[1] - ex[1]).abs())
                })
                .fold(0.0, f64::max)
        };
        let order = (err(16) / err(32)).log2();
        assert!(order >= 1.9, "order {order}");
    }

    #[test]
    fn trapezoid_integrates_bilinear_exactly() {
        let g = SpatialGrid::<f64>::square(8).unwrap();
        let v = g.sample(|x| 1.0 + x[0] + 2.0 * x[0] * x[1]);
        assert_abs_diff_eq!(g.integrate(&v), 2.0, epsilon = 1e-13);
    }

    #[test]
    fn single_precision_grid() {
        let g = SpatialGrid::<f32>::square(8).unwrap();
        assert!((g.boundary_measure() - 4.0).abs() < 1e-5);
        let q = AngularQuadrature::<f32>::new(Geometry::Slab, 8).unwrap();
        assert!((q.second_moment() - 1.0 / 3.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn boundary_weights_sum_to_perimeter(nx in 4usize..40, ny in 4usize..40) {
            let g = SpatialGrid::<f64>::build(Geometry::Square, &[nx, ny]).unwrap();
            prop_assert!((g.boundary_measure() - 4.0).abs() < 1e-12);
            prop_assert_eq!(g.boundary().len(), 2 * (nx + ny));
        }

        #[test]
        fn quadrature_normalised(half in 2usize..24) {
            for geometry in [Geometry::Slab, Geometry::Square] {
                let q = AngularQuadrature::<f64>::new(geometry, 2 * half).unwrap();
                prop_assert!((q.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
