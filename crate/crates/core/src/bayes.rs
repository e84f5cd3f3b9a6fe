//! Gaussian likelihoods for both forward models, prior importance sampling,
//! pCN chains, and Monte-Carlo estimators of evidences, KL divergence and
//! Hellinger distance between the two posteriors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::forward_map_de;
use crate::discretization::{AngularQuadrature, SpatialGrid};
use crate::error::{Error, Result};
use crate::measurement::{ForwardData, MeasurementSetup, ModelTag};
use crate::medium::{Coefficients, PriorSpec};
use crate::scalar::Real;
use crate::transport::{forward_map_rte, Lift, TransportOptions};

const NOISE_STREAM: u64 = 0;
const PRIOR_STREAM: u64 = 1 << 32;
const CHAIN_STREAM: u64 = 2 << 32;

/// Independent generator for task `index` under `master`.
///
/// Streams are addressed by counter, so the result of a task never depends on
/// which other tasks ran before it.
pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Everything needed to evaluate either forward map at a coefficient vector.
#[derive(Debug, Clone)]
pub struct ForwardModel<S> {
    pub grid: SpatialGrid<S>,
    pub quad: AngularQuadrature<S>,
    pub setup: MeasurementSetup,
    pub prior: PriorSpec,
    pub lift: Lift,
    pub options: TransportOptions,
}

impl<S: Real> ForwardModel<S> {
    pub fn new(
        grid: SpatialGrid<S>,
        quad: AngularQuadrature<S>,
        setup: MeasurementSetup,
        prior: PriorSpec,
    ) -> Result<Self> {
        setup.validate()?;
        prior.validate()?;
        setup.detector_nodes(&grid)?;
        Ok(ForwardModel {
            grid,
            quad,
            setup,
            prior,
            lift: Lift::One,
            options: TransportOptions::default(),
        })
    }

    /// Forward map of `model` at `theta`; `epsilon` is ignored for diffusion.
    pub fn forward(&self, model: ModelTag, theta: &Coefficients<S>, epsilon: S) -> Result<ForwardData<S>> {
        let medium = self.prior.medium(theta, &self.grid)?;
        let out = match model {
            ModelTag::Transport => forward_map_rte(
                &self.grid,
                &self.quad,
                &medium,
                epsilon,
                &self.setup,
                self.lift,
                &self.options,
            ),
            ModelTag::Diffusion => forward_map_de(&self.grid, &medium, &self.setup),
        };
        out.map_err(|e| {
            let theta: Vec<f64> = theta.0.iter().map(|t| t.as_f64()).collect();
            e.context(format!("{model} forward map at theta = {theta:?}, epsilon = {epsilon}"))
        })
    }

    /// `-|y - G(theta)|^2 / (2 gamma^2)` with `gamma` from the measurement setup.
    pub fn log_likelihood(
        &self,
        model: ModelTag,
        theta: &Coefficients<S>,
        data: &DataVector,
        epsilon: S,
    ) -> Result<f64> {
        let g = self.forward(model, theta, epsilon)?;
        misfit_log_likelihood(&g, data, self.setup.noise)
    }

    /// Both log-likelihoods at `theta`, transport first.
    pub fn log_likelihood_pair(&self, theta: &Coefficients<S>, data: &DataVector, epsilon: S) -> Result<(f64, f64)> {
        Ok((
            self.log_likelihood(ModelTag::Transport, theta, data, epsilon)?,
            self.log_likelihood(ModelTag::Diffusion, theta, data, epsilon)?,
        ))
    }

    /// Synthetic data `G(theta) + eta` with `eta ~ N(0, gamma^2 I)` drawn from `seed`.
    pub fn generate_data(
        &self,
        model: ModelTag,
        theta: &Coefficients<S>,
        epsilon: Option<S>,
        gamma: f64,
        seed: u64,
    ) -> Result<DataVector> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise level {gamma} must be finite and non-negative"
            )));
        }
        if !self.prior.medium(theta, &self.grid)?.is_admissible() {
            return Err(Error::InvalidArgument(
                "true coefficients give an inadmissible medium".into(),
            ));
        }
        let eps = match (model, epsilon) {
            (ModelTag::Transport, None) => {
                return Err(Error::InvalidArgument("transport data needs a Knudsen number".into()))
            }
            (ModelTag::Transport, Some(e)) => Some(e),
            (ModelTag::Diffusion, _) => None,
        };
        let g = self.forward(model, theta, eps.unwrap_or_else(S::one))?;
        let provenance = DataProvenance {
            model,
            theta: theta.0.iter().map(|t| t.as_f64()).collect(),
            seed,
            noise: gamma,
            epsilon: eps.map(|e| e.as_f64()),
        };
        let (j, k) = g.values.shape();
        let eta = noise_realization(seed, gamma, j, k);
        let values = DMatrix::from_fn(j, k, |a, b| g.values[(a, b)].as_f64() + eta[(a, b)]);
        DataVector::new(values, provenance)
    }

    /// `n` admissible prior draws, sample `i` taken from its own stream.
    pub fn prior_samples(&self, n: usize, seed: u64) -> Result<Vec<Coefficients<S>>> {
        (0..n).map(|i| self.prior_sample(seed, i)).collect()
    }

    pub fn prior_sample(&self, seed: u64, index: usize) -> Result<Coefficients<S>> {
        self.prior
            .sample(&self.grid, &mut stream(seed, PRIOR_STREAM + index as u64))
    }
}

fn noise_realization(seed: u64, gamma: f64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = stream(seed, NOISE_STREAM);
    let mut eta = DMatrix::zeros(rows, cols);
    // detector-major draw order, matching ForwardData::flatten
    for a in 0..rows {
        for b in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            eta[(a, b)] = gamma * z;
        }
    }
    eta
}

/// Gaussian log-likelihood normalized to peak value zero.
pub fn misfit_log_likelihood<S: Real>(g: &ForwardData<S>, data: &DataVector, gamma: f64) -> Result<f64> {
    if g.values.shape() != data.values.shape() {
        return Err(Error::DimensionMismatch {
            expected: data.values.len(),
            actual: g.values.len(),
            context: "likelihood",
        });
    }
    let ss: f64 = g
        .values
        .iter()
        .zip(data.values.iter())
        .map(|(a, b)| (b - a.as_f64()).powi(2))
        .sum();
    Ok(-ss / (2.0 * gamma * gamma))
}

/// How a data vector was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProvenance {
    pub model: ModelTag,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub noise: f64,
    pub epsilon: Option<f64>,
}

/// Observed detector-by-source matrix together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataVector {
    pub values: DMatrix<f64>,
    pub provenance: DataProvenance,
}

impl DataVector {
    pub fn new(values: DMatrix<f64>, provenance: DataProvenance) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("data vector has non-finite entries".into()));
        }
        if provenance.model == ModelTag::Transport && provenance.epsilon.is_none() {
            return Err(Error::InvalidArgument("transport data without a Knudsen number".into()));
        }
        Ok(DataVector { values, provenance })
    }

    /// Regenerates the additive noise from the stored seed and level.
    pub fn noise(&self) -> DMatrix<f64> {
        let (j, k) = self.values.shape();
        noise_realization(self.provenance.seed, self.provenance.noise, j, k)
    }

    /// Entries in detector-major order.
    pub fn flatten(&self) -> Vec<f64> {
        let (j, k) = self.values.shape();
        (0..j).flat_map(|a| (0..k).map(move |b| self.values[(a, b)])).collect()
    }
}

/// Conditions under which an estimate should not be trusted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorWarning {
    LowEffectiveSampleSize { model: ModelTag, ess: f64 },
    NegativeHellinger { raw: f64 },
    LowAcceptance { rate: f64 },
}

impl std::fmt::Display for EstimatorWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorWarning::LowEffectiveSampleSize { model, ess } => {
                write!(f, "{model} weights have effective sample size {ess:.1}")
            }
            EstimatorWarning::NegativeHellinger { raw } => {
                write!(f, "squared Hellinger estimate {raw:e} clamped to zero")
            }
            EstimatorWarning::LowAcceptance { rate } => write!(f, "pCN acceptance rate {rate:.4}"),
        }
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub warnings: Vec<EstimatorWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    PriorImportance,
    Pcn,
}

/// Coefficient samples with the log-likelihood of both models at each one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEnsemble {
    pub samples: Vec<Vec<f64>>,
    pub log_lik_rte: Vec<f64>,
    pub log_lik_de: Vec<f64>,
    pub mode: SamplingMode,
    pub seed: u64,
    pub epsilon: f64,
}

impl PosteriorEnsemble {
    pub fn new(
        samples: Vec<Vec<f64>>,
        log_lik_rte: Vec<f64>,
        log_lik_de: Vec<f64>,
        mode: SamplingMode,
        seed: u64,
        epsilon: f64,
    ) -> Result<Self> {
        let n = log_lik_rte.len();
        if log_lik_de.len() != n || (!samples.is_empty() && samples.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: log_lik_de.len().max(samples.len()),
                context: "paired log-likelihoods",
            });
        }
        if log_lik_rte.iter().chain(&log_lik_de).any(|l| !(*l <= 0.0)) {
            return Err(Error::InvalidArgument(
                "log-likelihoods must be finite and non-positive".into(),
            ));
        }
        Ok(PosteriorEnsemble {
            samples,
            log_lik_rte,
            log_lik_de,
            mode,
            seed,
            epsilon,
        })
    }

    /// Evaluates both likelihoods on `n` prior draws.
    pub fn from_prior<S: Real>(
        model: &ForwardModel<S>,
        data: &DataVector,
        epsilon: S,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(n);
        let (mut lr, mut ld) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for theta in model.prior_samples(n, seed)? {
            let (a, b) = model.log_likelihood_pair(&theta, data, epsilon)?;
            lr.push(a);
            ld.push(b);
            samples.push(theta.0.iter().map(|t| t.as_f64()).collect());
        }
        Self::new(samples, lr, ld, SamplingMode::PriorImportance, seed, epsilon.as_f64())
    }

    pub fn len(&self) -> usize {
        self.log_lik_rte.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_lik_rte.is_empty()
    }

    fn require_prior_samples(&self) -> Result<()> {
        if self.mode != SamplingMode::PriorImportance {
            return Err(Error::InvalidArgument(
                "evidence and divergence estimators need prior samples".into(),
            ));
        }
        if self.len() < 100 {
            return Err(Error::InvalidArgument(format!(
                "estimators need at least 100 prior samples, got {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Evidence `Z = E_prior[exp(l)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub z: f64,
    pub std_error: f64,
    pub log_z: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidences {
    pub rte: Evidence,
    pub de: Evidence,
    pub warnings: Vec<EstimatorWarning>,
}

fn max_of(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample covariance matrix of the columns.
fn covariance(cols: &[&[f64]]) -> DMatrix<f64> {
    let n = cols[0].len() as f64;
    let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    DMatrix::from_fn(cols.len(), cols.len(), |a, b| {
        cols[a]
            .iter()
            .zip(cols[b])
            .map(|(x, y)| (x - means[a]) * (y - means[b]))
            .sum::<f64>()
            / (n - 1.0)
    })
}

/// Standard error of `f(means)` by the delta method.
fn delta_method(cols: &[&[f64]], gradient: &[f64]) -> f64 {
    let c = covariance(cols);
    let g = nalgebra::DVector::from_column_slice(gradient);
    let var = (g.transpose() * &c * &g)[(0, 0)] / cols[0].len() as f64;
    var.max(0.0).sqrt()
}

fn evidence(ll: &[f64]) -> Evidence {
    let m = max_of(ll);
    let w: Vec<f64> = ll.iter().map(|l| (l - m).exp()).collect();
    let wbar = mean(&w);
    let sd = covariance(&[&w])[(0, 0)].sqrt();
    let ess = w.iter().sum::<f64>().powi(2) / w.iter().map(|x| x * x).sum::<f64>();
    Evidence {
        z: wbar * m.exp(),
        std_error: sd / (w.len() as f64).sqrt() * m.exp(),
        log_z: wbar.ln() + m,
        ess,
    }
}

fn ess_warning(model: ModelTag, e: &Evidence, out: &mut Vec<EstimatorWarning>) {
    if e.ess < 10.0 {
        out.push(EstimatorWarning::LowEffectiveSampleSize { model, ess: e.ess });
    }
}

/// Both evidences from the shared prior samples.
pub fn estimate_evidences(ensemble: &PosteriorEnsemble) -> Result<Evidences> {
    ensemble.require_prior_samples()?;
    let rte = evidence(&ensemble.log_lik_rte);
    let de = evidence(&ensemble.log_lik_de);
    let mut warnings = Vec::new();
    ess_warning(ModelTag::Transport, &rte, &mut warnings);
    ess_warning(ModelTag::Diffusion, &de, &mut warnings);
    Ok(Evidences { rte, de, warnings })
}

/// Which posterior the KL expectation is taken under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(mu_RTE || mu_DE)`, expectation under the transport posterior.
    #[default]
    TransportFirst,
    /// `KL(mu_DE || mu_RTE)`.
    DiffusionFirst,
}

/// Self-normalized importance estimate of `KL(p || q)` where the ensemble
/// weights are `exp(l_p)` and `exp(l_q)`.
fn kl_from(lp: &[f64], lq: &[f64]) -> (f64, f64) {
    let m = max_of(lp).max(max_of(lq));
    let b: Vec<f64> = lp.iter().map(|l| (l - m).exp()).collect();
    let c: Vec<f64> = lq.iter().map(|l| (l - m).exp()).collect();
    let a: Vec<f64> = b.iter().zip(lp.iter().zip(lq)).map(|(w, (p, q))| w * (p - q)).collect();
    let (abar, bbar, cbar) = (mean(&a), mean(&b), mean(&c));
    let value = abar / bbar + cbar.ln() - bbar.ln();
    let grad = [1.0 / bbar, -abar / (bbar * bbar) - 1.0 / bbar, 1.0 / cbar];
    (value, delta_method(&[&a, &b, &c], &grad))
}

/// KL divergence between the two posteriors.
pub fn estimate_kl(ensemble: &PosteriorEnsemble, direction: KlDirection) -> Result<Estimate> {
    let ev = estimate_evidences(ensemble)?;
    let (lr, ld) = (&ensemble.log_lik_rte, &ensemble.log_lik_de);
    let (value, std_error) = match direction {
        KlDirection::TransportFirst => kl_from(lr, ld),
        KlDirection::DiffusionFirst => kl_from(ld, lr),
    };
    Ok(Estimate {
        value,
        std_error,
        warnings: ev.warnings,
    })
}

/// Hellinger distance `d` with `d^2 = 1/2 E_prior[(sqrt(L_R/Z_R) - sqrt(L_D/Z_D))^2]`.
pub fn estimate_hellinger(ensemble: &PosteriorEnsemble) -> Result<Estimate> {
    let mut warnings = estimate_evidences(ensemble)?.warnings;
    let (lr, ld) = (&ensemble.log_lik_rte, &ensemble.log_lik_de);
    let m = max_of(lr).max(max_of(ld));
    let b: Vec<f64> = lr.iter().map(|l| (l - m).exp()).collect();
    let c: Vec<f64> = ld.iter().map(|l| (l - m).exp()).collect();
    let e: Vec<f64> = lr.iter().zip(ld).map(|(p, q)| (0.5 * (p + q) - m).exp()).collect();
    let (bbar, cbar, ebar) = (mean(&b), mean(&c), mean(&e));
    let root = (bbar * cbar).sqrt();
    let raw = 1.0 - ebar / root;
    let grad = [0.5 * ebar / (root * bbar), 0.5 * ebar / (root * cbar), -1.0 / root];
    let se_sq = delta_method(&[&b, &c, &e], &grad);
    let d2 = if raw < 0.0 {
        warnings.push(EstimatorWarning::NegativeHellinger { raw });
        0.0
    } else {
        raw.min(1.0)
    };
    let value = d2.sqrt();
    let std_error = if value > 0.0 {
        se_sq / (2.0 * value)
    } else {
        se_sq.sqrt()
    };
    Ok(Estimate {
        value,
        std_error,
        warnings,
    })
}

/// `d_Hell <= sqrt(KL)` up to `k` joint standard errors.
pub fn hellinger_below_root_kl(hellinger: &Estimate, kl: &Estimate, k: f64) -> bool {
    let root = kl.value.max(0.0).sqrt();
    let se_root = if root > 0.0 {
        kl.std_error / (2.0 * root)
    } else {
        kl.std_error.sqrt()
    };
    hellinger.value - root <= k * hellinger.std_error.hypot(se_root)
}

/// Ensemble for the unit-variance Gaussians `N(0, 1)` ("transport") and
/// `N(shift, 1)` ("diffusion") on one coordinate, sampled from the broad
/// reference `N(shift / 2, 2^2)` with log-weights relative to it.
///
/// The closed forms are `KL = shift^2 / 2` and `d^2 = 1 - exp(-shift^2 / 8)`.
pub fn gaussian_calibration_ensemble(shift: f64, n: usize, seed: u64) -> Result<PosteriorEnsemble> {
    let (centre, spread) = (0.5 * shift, 2.0);
    let mut rng = stream(seed, 0);
    let samples: Vec<f64> = (0..n)
        .map(|_| centre + spread * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let log_ratio = |x: f64, mu: f64| -0.5 * (x - mu).powi(2) + 0.5 * ((x - centre) / spread).powi(2) + spread.ln();
    let lr: Vec<f64> = samples.iter().map(|&x| log_ratio(x, 0.0)).collect();
    let ld: Vec<f64> = samples.iter().map(|&x| log_ratio(x, shift)).collect();
    let top = max_of(&lr).max(max_of(&ld));
    PosteriorEnsemble::new(
        samples.into_iter().map(|x| vec![x]).collect(),
        lr.iter().map(|l| l - top).collect(),
        ld.iter().map(|l| l - top).collect(),
        SamplingMode::PriorImportance,
        seed,
        0.0,
    )
}

/// Result of a pCN run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcnChain {
    pub ensemble: PosteriorEnsemble,
    pub target: ModelTag,
    pub beta: f64,
    pub acceptance_rate: f64,
    pub warnings: Vec<EstimatorWarning>,
}

/// Preconditioned Crank-Nicolson chain on prior coefficients.
///
/// `log_lik` returns `None` for inadmissible proposals, which are rejected,
/// and otherwise the `(transport, diffusion)` pair; the chain targets the
/// `target` component. The chain stores `length` states including the start.
pub fn pcn_chain<F>(
    prior: &PriorSpec,
    target: ModelTag,
    beta: f64,
    length: usize,
    seed: u64,
    init: Vec<f64>,
    epsilon: f64,
    mut log_lik: F,
) -> Result<PcnChain>
where
    F: FnMut(&Coefficients<f64>) -> Result<Option<(f64, f64)>>,
{
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("pCN step {beta} outside [0, 1]")));
    }
    if length == 0 {
        return Err(Error::InvalidArgument("pCN chain length must be positive".into()));
    }
    let pick = |p: (f64, f64)| match target {
        ModelTag::Transport => p.0,
        ModelTag::Diffusion => p.1,
    };
    let mut current = Coefficients(init);
    let mut pair = log_lik(&current)?.ok_or_else(|| Error::InvalidArgument("pCN start is not admissible".into()))?;
    let mut rng = stream(seed, CHAIN_STREAM);
    let shrink = (1.0 - beta * beta).sqrt();
    let (mut samples, mut lr, mut ld) = (Vec::new(), Vec::new(), Vec::new());
    let mut accepted = 0usize;
    samples.push(current.0.clone());
    lr.push(pair.0);
    ld.push(pair.1);
    for _ in 1..length {
        let zeta: Coefficients<f64> = prior.draw_gaussian(&mut rng);
        let proposal = Coefficients(
            current
                .0
                .iter()
                .zip(&zeta.0)
                .map(|(t, z)| shrink * t + beta * z)
                .collect(),
        );
        let u: f64 = rng.random();
        if let Some(p) = log_lik(&proposal)? {
            if u < (pick(p) - pick(pair)).exp() {
                current = proposal;
                pair = p;
                accepted += 1;
            }
        }
        samples.push(current.0.clone());
        lr.push(pair.0);
        ld.push(pair.1);
    }
    let acceptance_rate = if length > 1 {
        accepted as f64 / (length - 1) as f64
    } else {
        1.0
    };
    let mut warnings = Vec::new();
    if acceptance_rate < 0.01 {
        warnings.push(EstimatorWarning::LowAcceptance { rate: acceptance_rate });
    }
    Ok(PcnChain {
        ensemble: PosteriorEnsemble::new(samples, lr, ld, SamplingMode::Pcn, seed, epsilon)?,
        target,
        beta,
        acceptance_rate,
        warnings,
    })
}

/// pCN chain targeting the posterior of `target` for the given data.
pub fn pcn_sampler(
    model: &ForwardModel<f64>,
    data: &DataVector,
    target: ModelTag,
    epsilon: f64,
    beta: f64,
    length: usize,
    seed: u64,
    init: Vec<f64>,
) -> Result<PcnChain> {
    pcn_chain(&model.prior, target, beta, length, seed, init, epsilon, |theta| {
        if !model.prior.medium(theta, &model.grid)?.is_admissible() {
            return Ok(None);
        }
        model.log_likelihood_pair(theta, data, epsilon).map(Some)
    })
}
