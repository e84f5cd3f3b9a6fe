//! Boundary sources, detectors, and measurement matrices shared by both forward models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::discretization::{Geometry, SpatialGrid};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec2};

/// Which forward model produced a quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    #[serde(rename = "RTE")]
    Transport,
    #[serde(rename = "DE")]
    Diffusion,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelTag::Transport => "RTE",
            ModelTag::Diffusion => "DE",
        })
    }
}

/// Dirichlet source `c + b.x + a_xx x^2 + a_xy x y + a_yy y^2`, given in closed
/// form so that lifts can use its exact gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticTrace {
    pub constant: f64,
    pub linear: [f64; 2],
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl QuadraticTrace {
    pub fn constant(c: f64) -> Self {
        QuadraticTrace {
            constant: c,
            ..Default::default()
        }
    }

    pub fn affine(constant: f64, linear: [f64; 2]) -> Self {
        QuadraticTrace {
            constant,
            linear,
            ..Default::default()
        }
    }

    /// `x`
    pub fn coordinate() -> Self {
        Self::affine(0.0, [1.0, 0.0])
    }

    /// `1 - x`
    pub fn reflected() -> Self {
        Self::affine(1.0, [-1.0, 0.0])
    }

    /// `x^2`
    pub fn square_of_coordinate() -> Self {
        QuadraticTrace {
            xx: 1.0,
            ..Default::default()
        }
    }

    /// `x^2 - y^2`
    pub fn saddle() -> Self {
        QuadraticTrace {
            xx: 1.0,
            yy: -1.0,
            ..Default::default()
        }
    }

    pub fn is_constant(&self) -> bool {
        self.linear == [0.0, 0.0] && self.xx == 0.0 && self.xy == 0.0 && self.yy == 0.0
    }

    pub fn value<S: Real>(&self, x: Vec2<S>) -> S {
        let c = |v: f64| S::lit(v);
        c(self.constant)
            + c(self.linear[0]) * x[0]
            + c(self.linear[1]) * x[1]
            + c(self.xx) * x[0] * x[0]
            + c(self.xy) * x[0] * x[1]
            + c(self.yy) * x[1] * x[1]
    }

    pub fn gradient<S: Real>(&self, x: Vec2<S>) -> Vec2<S> {
        let c = |v: f64| S::lit(v);
        [
            c(self.linear[0]) + c(2.0 * self.xx) * x[0] + c(self.xy) * x[1],
            c(self.linear[1]) + c(self.xy) * x[0] + c(2.0 * self.yy) * x[1],
        ]
    }

    /// Constant Hessian `[[h_xx, h_xy], [h_xy, h_yy]]`.
    pub fn hessian<S: Real>(&self) -> [[S; 2]; 2] {
        [
            [S::lit(2.0 * self.xx), S::lit(self.xy)],
            [S::lit(self.xy), S::lit(2.0 * self.yy)],
        ]
    }
}

/// Discrete stand-in for a boundary point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mollifier {
    /// All mass on the detector node.
    Point,
    /// Piecewise-linear hat supported on `2 * half_width - 1` boundary nodes.
    Hat { half_width: usize },
    /// Smooth compactly supported bump of the given arclength radius.
    Bump { radius: f64 },
    /// Polynomial window `(1 - r^2)^4` of the given arclength radius.
    Window { radius: f64 },
}

impl Default for Mollifier {
    fn default() -> Self {
        Mollifier::Hat { half_width: 2 }
    }
}

/// A detector resolved on a grid: a boundary density integrating to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<S> {
    pub node: usize,
    /// Density value at every boundary slot (zero outside the support).
    pub density: Vec<S>,
}

impl<S: Real> Detector<S> {
    pub fn resolve(grid: &SpatialGrid<S>, node: usize, mollifier: Mollifier) -> Result<Self> {
        let centre = grid.boundary_node(node)?;
        let boundary = grid.boundary();
        let mut density = vec![S::zero(); boundary.len()];
        let slot = grid.boundary_slot(node).expect("boundary node has a slot");
        match (grid.geometry(), mollifier) {
            (Geometry::Slab, _) | (_, Mollifier::Point) => {
                density[slot] = S::one() / centre.weight;
            }
            (Geometry::Square, Mollifier::Hat { half_width }) => {
                if half_width == 0 {
                    return Err(Error::InvalidArgument("hat half-width must be positive".into()));
                }
                let n = boundary.len() as isize;
                let hw = half_width as isize;
                for off in -(hw - 1)..hw {
                    let b = (slot as isize + off).rem_euclid(n) as usize;
                    density[b] = S::one() - S::lit(off.unsigned_abs() as f64 / half_width as f64);
                }
            }
            (Geometry::Square, Mollifier::Bump { radius } | Mollifier::Window { radius }) => {
                if !(radius > 0.0 && radius < 2.0) {
                    return Err(Error::InvalidArgument(format!(
                        "mollifier radius {radius} out of range"
                    )));
                }
                let profile = |r: f64| match mollifier {
                    Mollifier::Bump { .. } => (-1.0 / (1.0 - r * r)).exp(),
                    _ => (1.0 - r * r).powi(4),
                };
                let s0 = perimeter_coordinate(centre.position);
                for (b, bn) in boundary.iter().enumerate() {
                    let mut d = (perimeter_coordinate(bn.position) - s0).abs();
                    d = d.min(4.0 - d);
                    let r = d / radius;
                    if r < 1.0 {
                        density[b] = S::lit(profile(r));
                    }
                }
            }
        }
        let mass: S = density.iter().zip(boundary).map(|(&d, b)| d * b.weight).sum();
        density.iter_mut().for_each(|d| *d /= mass);
        Ok(Detector { node, density })
    }

    /// `sum_b w_b delta(b) h(b)` for boundary values indexed by slot.
    pub fn apply(&self, grid: &SpatialGrid<S>, values: &[S]) -> S {
        self.density
            .iter()
            .zip(grid.boundary())
            .zip(values)
            .filter(|((d, _), _)| **d != S::zero())
            .map(|((&d, b), &v)| d * b.weight * v)
            .sum()
    }

    /// Boundary slots where the density is nonzero.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.density
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != S::zero())
            .map(|(b, _)| b)
    }

    /// Density values at every node (zero in the interior); usable as a Dirichlet trace.
    pub fn nodal_trace(&self, grid: &SpatialGrid<S>) -> Vec<S> {
        let mut out = vec![S::zero(); grid.node_count()];
        for (b, bn) in grid.boundary().iter().enumerate() {
            out[bn.node] = self.density[b];
        }
        out
    }
}

/// Counter-clockwise arclength from the origin along the unit square's boundary.
fn perimeter_coordinate<S: Real>(x: Vec2<S>) -> f64 {
    let (a, b) = (x[0].as_f64(), x[1].as_f64());
    let tol = 1e-12;
    if b <= tol {
        a
    } else if a >= 1.0 - tol {
        1.0 + b
    } else if b >= 1.0 - tol {
        3.0 - a
    } else {
        4.0 - b
    }
}

/// Detector locations, Dirichlet sources and noise level of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSetup {
    pub detectors: Vec<[f64; 2]>,
    pub traces: Vec<QuadraticTrace>,
    pub noise: f64,
    #[serde(default)]
    pub mollifier: Mollifier,
}

impl MeasurementSetup {
    /// Two endpoint detectors and the sources `x`, `1 - x`, `x^2` on the slab.
    pub fn slab_reference() -> Self {
        MeasurementSetup {
            detectors: vec![[0.0, 0.0], [1.0, 0.0]],
            traces: vec![
                QuadraticTrace::coordinate(),
                QuadraticTrace::reflected(),
                QuadraticTrace::square_of_coordinate(),
            ],
            noise: 0.05,
            mollifier: Mollifier::Point,
        }
    }

    pub fn detector_count(&self) -> usize {
        self.detectors.len()
    }

    pub fn trace_count(&self) -> usize {
        self.traces.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.detectors.is_empty() || self.traces.is_empty() {
            return Err(Error::InvalidArgument(
                "measurement setup needs at least one detector and one source".into(),
            ));
        }
        if !(self.noise > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise standard deviation must be positive, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Boundary nodes of the detectors on `grid`.
    pub fn detector_nodes<S: Real>(&self, grid: &SpatialGrid<S>) -> Result<Vec<usize>> {
        let h = grid.spacing()[0].as_f64();
        self.detectors
            .iter()
            .map(|&p| {
                let on_boundary = match grid.geometry() {
                    Geometry::Slab => p[0] == 0.0 || p[0] == 1.0,
                    Geometry::Square => {
                        let inside = (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
                        inside && (p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0)
                    }
                };
                if !on_boundary {
                    return Err(Error::InvalidArgument(format!(
                        "detector at {p:?} is not on the boundary"
                    )));
                }
                let node = grid.nearest_boundary_node([S::lit(p[0]), S::lit(p[1])]);
                let x = grid.node(node);
                let dist = (x[0].as_f64() - p[0]).hypot(x[1].as_f64() - p[1]);
                if dist > 0.5 * h + 1e-12 {
                    return Err(Error::InvalidArgument(format!("detector at {p:?} has no grid node")));
                }
                Ok(node)
            })
            .collect()
    }

    pub fn resolve_detectors<S: Real>(&self, grid: &SpatialGrid<S>) -> Result<Vec<Detector<S>>> {
        self.detector_nodes(grid)?
            .into_iter()
            .map(|n| Detector::resolve(grid, n, self.mollifier))
            .collect()
    }
}

/// Detector-by-source matrix of boundary measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardData<S: Real> {
    pub model: ModelTag,
    /// Knudsen number for transport data.
    pub epsilon: Option<f64>,
    pub values: DMatrix<S>,
}

impl<S: Real> ForwardData<S> {
    /// Entries in detector-major order: index `j * K + k`.
    pub fn flatten(&self) -> Vec<S> {
        let (j, k) = self.values.shape();
        (0..j)
            .flat_map(|a| (0..k).map(move |b| (a, b)))
            .map(|(a, b)| self.values[(a, b)])
            .collect()
    }

    pub fn max_abs_difference(&self, other: &ForwardData<S>) -> S {
        (&self.values - &other.values).amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn trace_values_and_gradients() {
        let t = QuadraticTrace {
            constant: 1.0,
            linear: [2.0, -1.0],
            xx: 0.5,
            xy: 3.0,
            yy: -2.0,
        };
        let x = [0.3, 0.7];
        let v: f64 = t.value(x);
        assert_abs_diff_eq!(v, 1.0 + 0.6 - 0.7 + 0.045 + 0.63 - 0.98, epsilon = 1e-14);
        let g: [f64; 2] = t.gradient(x);
        assert_abs_diff_eq!(g[0], 2.0 + 0.3 + 2.1, epsilon = 1e-14);
        assert_abs_diff_eq!(g[1], -1.0 + 0.9 - 2.8, epsilon = 1e-14);
        assert!(QuadraticTrace::constant(2.0).is_constant());
        assert!(!QuadraticTrace::saddle().is_constant());
    }

    #[test]
    fn slab_delta_is_endpoint_indicator() {
        let g = SpatialGrid::<f64>::slab(8).unwrap();
        let d = Detector::resolve(&g, 8, Mollifier::default()).unwrap();
        assert_eq!(d.density, vec![0.0, 1.0]);
        assert_eq!(d.apply(&g, &[3.0, 5.0]), 5.0);
        assert_eq!(Detector::resolve(&g, 3, Mollifier::Point), Err(Error::NotOnBoundary(3)));
    }

    #[test]
    fn square_mollifiers_have_unit_mass() {
        let g = SpatialGrid::<f64>::square(16).unwrap();
        let node = g.index(8, 0);
        for m in [
            Mollifier::Point,
            Mollifier::Hat { half_width: 2 },
            Mollifier::Bump { radius: 0.2 },
        ] {
            let d = Detector::resolve(&g, node, m).unwrap();
            let ones = vec![1.0; g.boundary().len()];
            assert_abs_diff_eq!(d.apply(&g, &ones), 1.0, epsilon = 1e-12);
        }
        let hat = Detector::resolve(&g, node, Mollifier::Hat { half_width: 2 }).unwrap();
        assert_eq!(hat.support().count(), 3);
        let corner = Detector::resolve(&g, 0, Mollifier::Hat { half_width: 2 }).unwrap();
        assert_eq!(corner.support().collect::<Vec<_>>(), vec![0, 1, 63]);
    }

    #[test]
    fn detectors_must_lie_on_boundary() {
        let g = SpatialGrid::<f64>::slab(8).unwrap();
        let mut setup = MeasurementSetup::slab_reference();
        assert_eq!(setup.detector_nodes(&g).unwrap(), vec![0, 8]);
        setup.detectors.push([0.5, 0.0]);
        assert!(setup.detector_nodes(&g).is_err());
        let sq = SpatialGrid::<f64>::square(8).unwrap();
        let s2 = MeasurementSetup {
            detectors: vec![[0.5, 1.0], [1.0, 0.25]],
            ..MeasurementSetup::slab_reference()
        };
        assert_eq!(s2.detector_nodes(&sq).unwrap(), vec![sq.index(4, 8), sq.index(8, 2)]);
    }

    #[test]
    fn flatten_is_detector_major() {
        let d = ForwardData {
            model: ModelTag::Diffusion,
            epsilon: None,
            values: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        };
        assert_eq!(d.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn model_tags_serialise_by_name() {
        assert_eq!(serde_json::to_string(&ModelTag::Transport).unwrap(), "\"RTE\"");
        let m: Mollifier = serde_json::from_str(r#"{"kind":"bump","radius":0.25}"#).unwrap();
        assert_eq!(m, Mollifier::Bump { radius: 0.25 });
    }
}
