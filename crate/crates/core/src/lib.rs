//! Forward and inverse problems for optical tomography in the diffusive regime.
//!
//! The crate couples a discrete-ordinate transport solver with its diffusion
//! limit and compares the two at three levels: forward maps, Bayesian
//! posteriors over a cosine-series medium prior, and linearized Gaussian
//! posteriors built from adjoint sensitivity kernels.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the double-precision instantiation used by the experiment
//! harness.

pub mod asymptotics;
pub mod bayes;
pub mod diffusion;
pub mod discretization;
pub mod error;
pub mod linalg;
pub mod linearized;
pub mod measurement;
pub mod medium;
pub mod scalar;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid = discretization::SpatialGrid<f64>;
pub type Quadrature = discretization::AngularQuadrature<f64>;
pub type Field = discretization::ScalarField<f64>;
pub type Medium = medium::Medium<f64>;
pub type Coefficients = medium::Coefficients<f64>;
pub type AngularFlux = transport::AngularFlux<f64>;
pub type BoundaryData = transport::KineticBoundaryData<f64>;
pub type ForwardData = measurement::ForwardData<f64>;
pub type ForwardModel = bayes::ForwardModel<f64>;
pub type KernelBank = linearized::KernelBank<f64>;
pub type GaussianPosterior = linearized::GaussianPosterior<f64>;
