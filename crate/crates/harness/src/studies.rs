//! Experiment drivers shared by the CLI and the acceptance suite.
//!
//! Independent solves run on the current rayon pool. Every task derives its
//! inputs from its index alone and results are collected in index order, so
//! the output does not depend on the number of threads.

use nalgebra::{DMatrix, DVector};
use optomo::asymptotics::{expansion_terms, fit_rate, residual_norms, RateStudy};
use optomo::bayes::{
    estimate_evidences, estimate_hellinger, estimate_kl, hellinger_below_root_kl, pcn_sampler, stream, DataVector,
    Estimate, Evidences, ForwardModel, PcnChain, PosteriorEnsemble, SamplingMode,
};
use optomo::diffusion::forward_map_de;
use optomo::linearized::{
    gaussian_hellinger, gaussian_update, kernel_bank_de, kernel_bank_rte, linear_map, linearized_data, moment_distance,
    tangent_residual, GaussianPosterior, KernelBank, KernelExport,
};
use optomo::measurement::{ForwardData, ModelTag};
use optomo::medium::Coefficients;
use optomo::transport::{forward_map_rte, lift_boundary, solve_rte, Lift};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;

const TRUTH_STREAM: u64 = 3 << 32;

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub metric: String,
    pub value: f64,
}

fn row(epsilon: f64, metric: &str, value: f64) -> SweepRow {
    SweepRow {
        epsilon,
        metric: metric.into(),
        value,
    }
}

/// Values of `metric` in sweep order.
pub fn series(rows: &[SweepRow], metric: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.epsilon, r.value))
        .collect()
}

/// Values below this are solver round-off.
pub const ZERO_FLOOR: f64 = 1e-9;

/// Fits each metric; a series that vanishes to round-off has no rate and is skipped.
fn fit_metrics(rows: &[SweepRow], metrics: &[&str]) -> Result<Vec<RateStudy>> {
    let mut out = Vec::new();
    for m in metrics {
        let s = series(rows, m);
        if !s.is_empty() && s.iter().all(|p| p.1.abs() < ZERO_FLOOR) {
            continue;
        }
        out.push(fit_rate(*m, &s)?);
    }
    Ok(out)
}

fn forward_model(cfg: &ExperimentConfig, lift: Lift) -> Result<ForwardModel<f64>> {
    let mut model = ForwardModel::new(cfg.grid()?, cfg.quadrature()?, cfg.setup.clone(), cfg.prior.clone())?;
    model.lift = lift;
    model.options = cfg.transport;
    Ok(model)
}

/// Both forward maps at the configured medium.
#[derive(Debug, Clone)]
pub struct ForwardOutcome {
    pub diffusion: ForwardData<f64>,
    pub transport: Vec<ForwardData<f64>>,
}

pub fn forward_study(cfg: &ExperimentConfig) -> Result<ForwardOutcome> {
    let grid = cfg.grid()?;
    let quad = cfg.quadrature()?;
    let medium = cfg.prior.medium(&cfg.medium_coefficients(), &grid)?;
    let diffusion = forward_map_de(&grid, &medium, &cfg.setup)?;
    let transport = cfg
        .epsilons
        .par_iter()
        .map(|&eps| {
            forward_map_rte(
                &grid,
                &quad,
                &medium,
                eps,
                &cfg.setup,
                cfg.rates.gap_lift,
                &cfg.transport,
            )
        })
        .collect::<optomo::Result<Vec<_>>>()?;
    Ok(ForwardOutcome { diffusion, transport })
}

/// Forward-gap sweep over many prior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBound {
    pub draws: usize,
    /// Largest `max_eps gap / gap(eps_max)` over the draws.
    pub worst_ratio: f64,
    /// Draws whose ratio exceeds 1.2.
    pub violations: usize,
    pub min_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesOutcome {
    pub rows: Vec<SweepRow>,
    pub studies: Vec<RateStudy>,
    pub uniform: Option<UniformBound>,
}

pub const RATE_METRICS: [&str; 3] = ["r0", "r1", "forward_gap"];

/// Residuals of the zeroth- and first-order expansions and the forward-map gap.
pub fn rates_study(cfg: &ExperimentConfig) -> Result<RatesOutcome> {
    let grid = cfg.grid()?;
    let quad = cfg.quadrature()?;
    let medium = cfg.prior.medium(&cfg.medium_coefficients(), &grid)?;
    let terms = expansion_terms(&grid, &quad, &medium, &cfg.rates.trace)?;
    let per_eps = cfg
        .epsilons
        .par_iter()
        .map(|&eps| -> optomo::Result<Vec<SweepRow>> {
            let solve = |lift| -> optomo::Result<_> {
                let bc = lift_boundary(&grid, &quad, &medium, eps, &cfg.rates.trace, lift)?;
                Ok(solve_rte(&grid, &quad, &medium, eps, &bc, &cfg.transport)?.flux)
            };
            let (r0, _) = residual_norms(&solve(Lift::Zero)?, &terms)?;
            let (_, r1) = residual_norms(&solve(cfg.rates.first_order_lift)?, &terms)?;
            let gap = optomo::asymptotics::forward_gap(
                &grid,
                &quad,
                &medium,
                eps,
                &cfg.setup,
                cfg.rates.gap_lift,
                &cfg.transport,
            )?;
            Ok(vec![
                row(eps, "r0", r0),
                row(eps, "r1", r1),
                row(eps, "forward_gap", gap),
            ])
        })
        .collect::<optomo::Result<Vec<_>>>()?;
    let rows: Vec<SweepRow> = per_eps.into_iter().flatten().collect();
    let studies = fit_metrics(&rows, &RATE_METRICS)?;
    let uniform = if cfg.rates.uniform_draws > 0 {
        Some(uniform_bound(cfg)?)
    } else {
        None
    };
    Ok(RatesOutcome { rows, studies, uniform })
}

/// Forward-gap sweeps at `cfg.rates.uniform_draws` admissible prior draws.
pub fn uniform_bound(cfg: &ExperimentConfig) -> Result<UniformBound> {
    let model = forward_model(cfg, cfg.rates.gap_lift)?;
    let draws = cfg.rates.uniform_draws;
    let results = (0..draws)
        .into_par_iter()
        .map(|i| -> optomo::Result<(f64, f64)> {
            let theta = model.prior_sample(cfg.seed, i)?;
            let de = model.forward(ModelTag::Diffusion, &theta, 1.0)?;
            let gaps = cfg
                .epsilons
                .iter()
                .map(|&eps| {
                    Ok((
                        eps,
                        model.forward(ModelTag::Transport, &theta, eps)?.max_abs_difference(&de),
                    ))
                })
                .collect::<optomo::Result<Vec<_>>>()?;
            let max = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
            let slope = fit_rate("forward_gap", &gaps)?.slope;
            Ok((max / gaps[0].1, slope))
        })
        .collect::<optomo::Result<Vec<_>>>()?;
    Ok(UniformBound {
        draws,
        worst_ratio: results.iter().map(|r| r.0).fold(0.0, f64::max),
        violations: results.iter().filter(|r| r.0 > 1.2).count(),
        min_slope: results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
    })
}

/// True coefficients of the synthetic data.
pub fn truth(cfg: &ExperimentConfig) -> Result<Coefficients<f64>> {
    match &cfg.bayes.truth {
        Some(t) => Ok(Coefficients(t.clone())),
        None => Ok(cfg.prior.sample(&cfg.grid()?, &mut stream(cfg.seed, TRUTH_STREAM))?),
    }
}

pub fn make_data(cfg: &ExperimentConfig) -> Result<DataVector> {
    let model = forward_model(cfg, cfg.bayes.lift)?;
    let eps = match cfg.bayes.data_model {
        ModelTag::Transport => cfg.bayes.data_epsilon.or(cfg.epsilons.last().copied()),
        ModelTag::Diffusion => None,
    };
    Ok(model.generate_data(cfg.bayes.data_model, &truth(cfg)?, eps, cfg.setup.noise, cfg.seed)?)
}

/// Estimates at one Knudsen number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPoint {
    pub epsilon: f64,
    pub kl: Estimate,
    pub hellinger: Estimate,
    pub evidences: Evidences,
    /// `d_Hell <= sqrt(KL)` within two joint standard errors.
    pub hellinger_below_root_kl: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorOutcome {
    pub data: DataVector,
    pub rows: Vec<SweepRow>,
    pub points: Vec<PosteriorPoint>,
    pub studies: Vec<RateStudy>,
    pub ensembles: Vec<PosteriorEnsemble>,
    pub pcn: Option<PcnChain>,
}

pub const POSTERIOR_METRICS: [&str; 3] = ["kl", "hellinger", "evidence_gap"];

/// KL and Hellinger sweeps from one shared set of prior samples.
pub fn posterior_study(cfg: &ExperimentConfig) -> Result<PosteriorOutcome> {
    let model = forward_model(cfg, cfg.bayes.lift)?;
    let data = make_data(cfg)?;
    let n = cfg.bayes.samples;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| model.prior_sample(cfg.seed, i))
        .collect::<optomo::Result<Vec<_>>>()?;
    let flat: Vec<Vec<f64>> = samples.iter().map(|t| t.0.clone()).collect();
    let ll_de = samples
        .par_iter()
        .map(|t| model.log_likelihood(ModelTag::Diffusion, t, &data, 1.0))
        .collect::<optomo::Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut ensembles = Vec::new();
    for &eps in &cfg.epsilons {
        let ll_rte = samples
            .par_iter()
            .map(|t| model.log_likelihood(ModelTag::Transport, t, &data, eps))
            .collect::<optomo::Result<Vec<_>>>()?;
        let ens = PosteriorEnsemble::new(
            flat.clone(),
            ll_rte,
            ll_de.clone(),
            SamplingMode::PriorImportance,
            cfg.seed,
            eps,
        )?;
        let kl = estimate_kl(&ens, cfg.bayes.kl_direction)?;
        let hellinger = estimate_hellinger(&ens)?;
        let evidences = estimate_evidences(&ens)?;
        rows.extend([
            row(eps, "kl", kl.value),
            row(eps, "kl_se", kl.std_error),
            row(eps, "hellinger", hellinger.value),
            row(eps, "hellinger_se", hellinger.std_error),
            row(eps, "z_rte", evidences.rte.z),
            row(eps, "z_de", evidences.de.z),
            row(eps, "evidence_gap", (evidences.rte.z - evidences.de.z).abs()),
            row(eps, "ess_rte", evidences.rte.ess),
        ]);
        points.push(PosteriorPoint {
            epsilon: eps,
            hellinger_below_root_kl: hellinger_below_root_kl(&hellinger, &kl, 2.0),
            kl,
            hellinger,
            evidences,
        });
        ensembles.push(ens);
    }
    let studies = fit_metrics(&rows, &POSTERIOR_METRICS)?;
    let pcn = match &cfg.bayes.pcn {
        Some(p) => {
            let init = truth(cfg)?.0;
            Some(pcn_sampler(
                &model, &data, p.target, p.epsilon, p.beta, p.length, cfg.seed, init,
            )?)
        }
        None => None,
    };
    Ok(PosteriorOutcome {
        data,
        rows,
        points,
        studies,
        ensembles,
        pcn,
    })
}

/// Linearized posteriors and gaps at one Knudsen number.
#[derive(Debug, Clone)]
pub struct LinearizedPoint {
    pub epsilon: f64,
    pub bank: KernelBank<f64>,
    pub map: DMatrix<f64>,
    pub posterior: GaussianPosterior<f64>,
    pub pair_gaps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearizedOutcome {
    pub rows: Vec<SweepRow>,
    pub studies: Vec<RateStudy>,
    pub diffusion_bank: KernelBank<f64>,
    pub diffusion_map: DMatrix<f64>,
    pub diffusion_posterior: GaussianPosterior<f64>,
    pub prior_covariance: DMatrix<f64>,
    pub points: Vec<LinearizedPoint>,
    /// `(model, residual at w, residual at w/2)` at the smallest epsilon.
    pub tangent: Vec<(ModelTag, f64, f64)>,
    /// `|(G_R - G_D)(2w)| / |(G_R - G_D) w|` at the smallest epsilon.
    pub linearity_ratio: Option<f64>,
    pub contraction_holds: bool,
}

pub const LINEARIZED_METRICS: [&str; 5] = ["kernel_gap", "map_gap", "hellinger", "mean_gap", "covariance_gap"];

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

pub fn linearized_study(cfg: &ExperimentConfig) -> Result<LinearizedOutcome> {
    let lifts = cfg.linearized.lifts;
    let model = forward_model(cfg, lifts.forward)?;
    let grid = &model.grid;
    let theta0 = Coefficients(
        cfg.linearized
            .background
            .clone()
            .unwrap_or_else(|| vec![0.0; cfg.prior.basis_size]),
    );
    let background = cfg.prior.medium(&theta0, grid)?;
    let data = make_data(cfg)?;
    let m = cfg.prior.basis_size;
    let prior_covariance = cfg.prior.covariance::<f64>();
    let prior_mean = DVector::zeros(m);
    let gamma = cfg.setup.noise;

    let diffusion_bank = kernel_bank_de(grid, &background, &cfg.setup)?;
    let diffusion_map = linear_map(&diffusion_bank, &cfg.prior, grid)?;
    let z_de = linearized_data(&data, &model.forward(ModelTag::Diffusion, &theta0, 1.0)?)?;
    let diffusion_posterior = gaussian_update(&diffusion_map, &prior_covariance, &prior_mean, gamma, &z_de)?;

    let points = cfg
        .epsilons
        .par_iter()
        .map(|&eps| -> optomo::Result<LinearizedPoint> {
            let bank = kernel_bank_rte(grid, &model.quad, &background, eps, &cfg.setup, lifts, &cfg.transport)?;
            let map = linear_map(&bank, &cfg.prior, grid)?;
            let z = linearized_data(&data, &model.forward(ModelTag::Transport, &theta0, eps)?)?;
            let posterior = gaussian_update(&map, &prior_covariance, &prior_mean, gamma, &z)?;
            let pair_gaps = bank.pairwise_gaps(&diffusion_bank);
            Ok(LinearizedPoint {
                epsilon: eps,
                bank,
                map,
                posterior,
                pair_gaps,
            })
        })
        .collect::<optomo::Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut contraction_holds = diffusion_posterior.contracts(&prior_covariance, 1e-12);
    for p in &points {
        let (mean_gap, cov_gap) = moment_distance(&p.posterior, &diffusion_posterior)?;
        rows.extend([
            row(p.epsilon, "kernel_gap", p.pair_gaps.iter().copied().fold(0.0, f64::max)),
            row(p.epsilon, "map_gap", spectral_norm(&(&p.map - &diffusion_map))),
            row(
                p.epsilon,
                "hellinger",
                gaussian_hellinger(&p.posterior, &diffusion_posterior)?,
            ),
            row(p.epsilon, "mean_gap", mean_gap),
            row(p.epsilon, "covariance_gap", cov_gap),
        ]);
        for (i, g) in p.pair_gaps.iter().enumerate() {
            rows.push(row(
                p.epsilon,
                &format!("kernel_gap_{}_{}", i / p.bank.traces, i % p.bank.traces),
                *g,
            ));
        }
        contraction_holds &= p.posterior.contracts(&prior_covariance, 1e-12);
    }
    let studies = fit_metrics(&rows, &LINEARIZED_METRICS)?;

    let mut tangent = Vec::new();
    let mut linearity_ratio = None;
    if let (Some(w), Some(last)) = (&cfg.linearized.perturbation, points.last()) {
        let w = Coefficients(w.clone());
        let half = Coefficients(w.0.iter().map(|x| 0.5 * x).collect());
        for (tag, g) in [(ModelTag::Diffusion, &diffusion_map), (ModelTag::Transport, &last.map)] {
            tangent.push((
                tag,
                tangent_residual(&model, tag, g, &theta0, &w, last.epsilon)?,
                tangent_residual(&model, tag, g, &theta0, &half, last.epsilon)?,
            ));
        }
        let diff = &last.map - &diffusion_map;
        let wv = DVector::from_column_slice(&w.0);
        let one = (&diff * &wv).norm();
        let two = (&diff * (&wv * 2.0)).norm();
        linearity_ratio = Some(if one > 0.0 { two / one } else { 2.0 });
    }
    Ok(LinearizedOutcome {
        rows,
        studies,
        diffusion_bank,
        diffusion_map,
        diffusion_posterior,
        prior_covariance,
        points,
        tangent,
        linearity_ratio,
        contraction_holds,
    })
}

impl LinearizedOutcome {
    pub fn kernel_exports(&self, cfg: &ExperimentConfig) -> Result<Vec<KernelExport>> {
        let grid = cfg.grid()?;
        let mut out = vec![self.diffusion_bank.export(&grid)];
        out.extend(self.points.iter().map(|p| p.bank.export(&grid)));
        Ok(out)
    }
}

/// Relative shift of every metric between a run and its refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardRow {
    pub epsilon: f64,
    pub metric: String,
    pub coarse: f64,
    pub fine: f64,
    pub relative_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub coarse_resolution: usize,
    pub fine_resolution: usize,
    pub rows: Vec<GuardRow>,
    pub max_shift: f64,
}

pub fn guard_report(coarse: &[SweepRow], fine: &[SweepRow], metrics: &[&str], resolution: usize) -> GuardReport {
    let rows: Vec<GuardRow> = coarse
        .iter()
        .filter(|r| metrics.contains(&r.metric.as_str()))
        .filter_map(|c| {
            let f = fine.iter().find(|f| f.metric == c.metric && f.epsilon == c.epsilon)?;
            Some(GuardRow {
                epsilon: c.epsilon,
                metric: c.metric.clone(),
                coarse: c.value,
                fine: f.value,
                relative_shift: (f.value - c.value).abs() / f.value.abs().max(f64::MIN_POSITIVE),
            })
        })
        .collect();
    let max_shift = rows.iter().map(|r| r.relative_shift).fold(0.0, f64::max);
    GuardReport {
        coarse_resolution: resolution,
        fine_resolution: 2 * resolution,
        rows,
        max_shift,
    }
}
