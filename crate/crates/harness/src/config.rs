//! JSON experiment configuration.
//!
//! Every section except the geometry, resolution and epsilon list has
//! defaults, so a minimal config only names those. See `docs/config.md` for
//! the schema.

use std::path::{Path, PathBuf};

use optomo::bayes::KlDirection;
use optomo::discretization::{AngularQuadrature, Geometry, SpatialGrid};
use optomo::linearized::KernelLifts;
use optomo::measurement::{MeasurementSetup, ModelTag, Mollifier, QuadraticTrace};
use optomo::medium::{Coefficients, PriorSpec};
use optomo::transport::{Lift, TransportOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Informational tag naming the study a config was written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Forward,
    #[default]
    Rates,
    PosteriorCompare,
    LinearizedCompare,
    MakeData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: ExperimentKind,
    pub geometry: Geometry,
    /// Cells per side.
    pub resolution: usize,
    #[serde(default = "default_ordinates")]
    pub ordinates: usize,
    /// Strictly decreasing Knudsen numbers.
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default = "MeasurementSetup::slab_reference")]
    pub setup: MeasurementSetup,
    /// Coefficients of the medium used by `forward` and `rates`; zeros when absent.
    #[serde(default)]
    pub medium: Option<Vec<f64>>,
    #[serde(default)]
    pub transport: TransportOptions,
    #[serde(default)]
    pub rates: RatesConfig,
    #[serde(default)]
    pub bayes: BayesConfig,
    #[serde(default)]
    pub linearized: LinearizedConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_ordinates() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatesConfig {
    /// Dirichlet source of the residual studies.
    pub trace: QuadraticTrace,
    /// Inflow lift for the first-order residual.
    pub first_order_lift: Lift,
    /// Inflow lift for the forward-map gap.
    pub gap_lift: Lift,
    /// Extra prior draws for the uniform forward-gap bound; zero skips it.
    pub uniform_draws: usize,
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig {
            trace: QuadraticTrace::coordinate(),
            first_order_lift: Lift::One,
            gap_lift: Lift::One,
            uniform_draws: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesConfig {
    pub samples: usize,
    /// True coefficients; drawn from the prior with the master seed when absent.
    pub truth: Option<Vec<f64>>,
    pub data_model: ModelTag,
    /// Knudsen number of transport-generated data.
    pub data_epsilon: Option<f64>,
    pub kl_direction: KlDirection,
    pub lift: Lift,
    pub pcn: Option<PcnConfig>,
}

impl Default for BayesConfig {
    fn default() -> Self {
        BayesConfig {
            samples: 2000,
            truth: None,
            data_model: ModelTag::Diffusion,
            data_epsilon: None,
            kl_direction: KlDirection::TransportFirst,
            lift: Lift::One,
            pcn: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcnConfig {
    pub beta: f64,
    pub length: usize,
    pub target: ModelTag,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearizedConfig {
    /// Background coefficients `theta0`.
    pub background: Option<Vec<f64>>,
    /// Test perturbation for tangent and linearity checks.
    pub perturbation: Option<Vec<f64>>,
    pub lifts: KernelLifts,
    /// Write kernel banks as JSON.
    pub export_kernels: bool,
}

impl ExperimentConfig {
    /// Parses config bytes, reporting schema violations with their field path.
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Ok((Self::from_slice(&bytes)?, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |path: &str, message: String| HarnessError::Schema {
            path: path.into(),
            message,
        };
        let invalid = |path: &str, message: String| Err(schema(path, message));
        if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return invalid("epsilons", "must be strictly decreasing".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return invalid("epsilons", format!("{e} outside (0, 1]"));
        }
        self.prior.validate().map_err(|e| schema("prior", e.to_string()))?;
        self.setup.validate().map_err(|e| schema("setup", e.to_string()))?;
        let m = self.prior.basis_size;
        for (path, v) in [
            ("medium", &self.medium),
            ("bayes.truth", &self.bayes.truth),
            ("linearized.background", &self.linearized.background),
            ("linearized.perturbation", &self.linearized.perturbation),
        ] {
            if let Some(v) = v {
                if v.len() != m {
                    return invalid(path, format!("expected {m} coefficients, got {}", v.len()));
                }
            }
        }
        if let Some(p) = &self.bayes.pcn {
            if !(0.0..=1.0).contains(&p.beta) {
                return invalid("bayes.pcn.beta", format!("{} outside [0, 1]", p.beta));
            }
        }
        let grid = self.grid().map_err(|e| schema("resolution", e.to_string()))?;
        self.setup
            .detector_nodes(&grid)
            .map_err(|e| schema("setup.detectors", e.to_string()))?;
        self.quadrature().map_err(|e| schema("ordinates", e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> optomo::Result<SpatialGrid<f64>> {
        SpatialGrid::build(self.geometry, &[self.resolution])
    }

    pub fn quadrature(&self) -> optomo::Result<AngularQuadrature<f64>> {
        AngularQuadrature::new(self.geometry, self.ordinates)
    }

    pub fn medium_coefficients(&self) -> Coefficients<f64> {
        Coefficients(self.medium.clone().unwrap_or_else(|| vec![0.0; self.prior.basis_size]))
    }

    /// Copy with the spatial resolution doubled.
    pub fn refined(&self) -> Self {
        ExperimentConfig {
            resolution: 2 * self.resolution,
            ..self.clone()
        }
    }

    /// Slab setup used by the rate and Bayesian studies.
    pub fn slab_reference() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Rates,
            geometry: Geometry::Slab,
            resolution: 2048,
            ordinates: 16,
            epsilons: reference_epsilons(),
            prior: PriorSpec::default(),
            setup: MeasurementSetup::slab_reference(),
            medium: None,
            transport: TransportOptions::default(),
            rates: RatesConfig::default(),
            bayes: BayesConfig::default(),
            linearized: LinearizedConfig::default(),
            seed: 20_240_601,
            out_dir: None,
        }
    }

    /// Square setup for the second-order studies.
    pub fn square_reference() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::LinearizedCompare,
            geometry: Geometry::Square,
            resolution: 128,
            setup: MeasurementSetup {
                detectors: vec![[1.0, 0.5], [0.5, 0.0]],
                traces: vec![
                    QuadraticTrace::coordinate(),
                    QuadraticTrace::saddle(),
                    QuadraticTrace::affine(0.0, [0.0, 1.0]),
                ],
                noise: 0.05,
                mollifier: Mollifier::Window { radius: 0.45 },
            },
            rates: RatesConfig {
                trace: QuadraticTrace::saddle(),
                first_order_lift: Lift::Diffusive,
                gap_lift: Lift::One,
                uniform_draws: 0,
            },
            linearized: LinearizedConfig {
                background: None,
                perturbation: Some(vec![0.05, -0.05, 0.05]),
                lifts: KernelLifts {
                    forward: Lift::Second,
                    adjoint: Lift::Second,
                },
                export_kernels: false,
            },
            ..Self::slab_reference()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `0.4 * 2^(-i/2)` for `i = 0..6`, ending at about 0.05.
pub fn reference_epsilons() -> Vec<f64> {
    (0..7).map(|i| 0.4 * 0.5f64.powf(i as f64 / 2.0)).collect()
}

/// Hex SHA-256 of the config bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
