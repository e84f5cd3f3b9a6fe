//! Subcommands: run a study, write its artifacts, return a report.

use std::path::PathBuf;
use std::time::Instant;

use optomo::asymptotics::RateStudy;
use optomo::measurement::ForwardData;
use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, ExperimentConfig};
use crate::error::Result;
use crate::output::ArtifactDir;
use crate::studies::{
    forward_study, guard_report, linearized_study, make_data, posterior_study, rates_study, GuardReport,
    LINEARIZED_METRICS, POSTERIOR_METRICS, RATE_METRICS,
};

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub refine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// SHA-256 of the stored `config.json`.
    pub fingerprint: String,
    pub studies: Vec<RateStudy>,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<GuardReport>,
}

struct Run {
    command: &'static str,
    cfg: ExperimentConfig,
    dir: ArtifactDir,
    fingerprint: String,
    start: Instant,
    warnings: Vec<String>,
}

impl Run {
    fn start(command: &'static str, cfg_bytes: &[u8], opts: &RunOptions) -> Result<Self> {
        let mut cfg = ExperimentConfig::from_slice(cfg_bytes)?;
        let stored = match opts.seed {
            Some(seed) => {
                cfg.seed = seed;
                cfg.to_json().into_bytes()
            }
            None => cfg_bytes.to_vec(),
        };
        let mut dir = ArtifactDir::create(&opts.out)?;
        dir.bytes("config.json", &stored)?;
        Ok(Run {
            command,
            cfg,
            dir,
            fingerprint: fingerprint(&stored),
            start: Instant::now(),
            warnings: Vec::new(),
        })
    }

    fn finish(self, studies: Vec<RateStudy>, guard: Option<GuardReport>) -> Result<RunReport> {
        let Run {
            command,
            mut dir,
            fingerprint,
            start,
            warnings,
            ..
        } = self;
        if let Some(g) = &guard {
            dir.json("refine.json", g)?;
        }
        let studies = studies
            .into_iter()
            .map(|mut s| {
                s.fingerprint = Some(fingerprint.clone());
                s
            })
            .collect();
        let root = dir.root().to_path_buf();
        let report = RunReport {
            command: command.into(),
            fingerprint,
            studies,
            wall_time_s: start.elapsed().as_secs_f64(),
            warnings,
            artifacts: dir.into_written(),
            guard,
        };
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        let path = root.join("report.json");
        std::fs::write(&path, text).map_err(|e| crate::error::HarnessError::io(&path, e))?;
        Ok(report)
    }
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build()?.install(f)
}

#[derive(Serialize)]
struct ForwardRow {
    epsilon: Option<f64>,
    detector: usize,
    source: usize,
    value: f64,
}

fn forward_rows(data: &ForwardData<f64>) -> Vec<ForwardRow> {
    let (j, k) = data.values.shape();
    (0..j)
        .flat_map(|a| (0..k).map(move |b| (a, b)))
        .map(|(a, b)| ForwardRow {
            epsilon: data.epsilon,
            detector: a,
            source: b,
            value: data.values[(a, b)],
        })
        .collect()
}

pub fn cmd_forward(cfg_bytes: &[u8], opts: &RunOptions) -> Result<RunReport> {
    let mut run = Run::start("forward", cfg_bytes, opts)?;
    let out = in_pool(opts.threads, || forward_study(&run.cfg))?;
    run.dir.csv("forward_DE.csv", &forward_rows(&out.diffusion))?;
    let rte: Vec<ForwardRow> = out.transport.iter().flat_map(forward_rows).collect();
    run.dir.csv("forward_RTE.csv", &rte)?;
    run.finish(Vec::new(), None)
}

pub fn cmd_rates(cfg_bytes: &[u8], opts: &RunOptions) -> Result<RunReport> {
    let mut run = Run::start("rates", cfg_bytes, opts)?;
    let out = in_pool(opts.threads, || rates_study(&run.cfg))?;
    run.dir.sweep("rates", &out.rows, &out.studies)?;
    if let Some(u) = &out.uniform {
        run.dir.json("uniform_bound.json", u)?;
        if u.violations > 0 {
            run.warnings.push(format!(
                "{} of {} draws exceed the uniform forward-gap bound",
                u.violations, u.draws
            ));
        }
    }
    let guard = if opts.refine {
        let fine = in_pool(opts.threads, || rates_study(&run.cfg.refined()))?;
        Some(guard_report(&out.rows, &fine.rows, &RATE_METRICS, run.cfg.resolution))
    } else {
        None
    };
    run.finish(out.studies, guard)
}

pub fn cmd_posterior_compare(cfg_bytes: &[u8], opts: &RunOptions) -> Result<RunReport> {
    let mut run = Run::start("posterior-compare", cfg_bytes, opts)?;
    let out = in_pool(opts.threads, || posterior_study(&run.cfg))?;
    run.dir.json("data.json", &out.data)?;
    run.dir.sweep("posterior", &out.rows, &out.studies)?;
    run.dir.json("posterior_points.json", &out.points)?;
    for (i, e) in out.ensembles.iter().enumerate() {
        run.dir.json(&format!("ensembles/eps_{i}.json"), e)?;
    }
    for p in &out.points {
        for w in p.kl.warnings.iter().chain(&p.hellinger.warnings) {
            run.warnings.push(format!("eps {}: {w}", p.epsilon));
        }
        if !p.hellinger_below_root_kl {
            run.warnings.push(format!(
                "eps {}: Hellinger exceeds sqrt(KL) by more than two standard errors",
                p.epsilon
            ));
        }
    }
    if let Some(chain) = &out.pcn {
        run.dir.json("pcn.json", chain)?;
        run.warnings.extend(chain.warnings.iter().map(|w| w.to_string()));
    }
    let guard = if opts.refine {
        let fine = in_pool(opts.threads, || posterior_study(&run.cfg.refined()))?;
        Some(guard_report(
            &out.rows,
            &fine.rows,
            &POSTERIOR_METRICS,
            run.cfg.resolution,
        ))
    } else {
        None
    };
    run.finish(out.studies, guard)
}

#[derive(Serialize)]
struct PosteriorRecord<'a> {
    model: &'static str,
    epsilon: Option<f64>,
    posterior: optomo::linearized::PosteriorSummary,
    map: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair_gaps: Option<&'a [f64]>,
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn cmd_linearized_compare(cfg_bytes: &[u8], opts: &RunOptions) -> Result<RunReport> {
    let mut run = Run::start("linearized-compare", cfg_bytes, opts)?;
    let out = in_pool(opts.threads, || linearized_study(&run.cfg))?;
    run.dir.sweep("linearized", &out.rows, &out.studies)?;
    let mut records = vec![PosteriorRecord {
        model: "DE",
        epsilon: None,
        posterior: out.diffusion_posterior.summary(),
        map: rows_of(&out.diffusion_map),
        pair_gaps: None,
    }];
    records.extend(out.points.iter().map(|p| PosteriorRecord {
        model: "RTE",
        epsilon: Some(p.epsilon),
        posterior: p.posterior.summary(),
        map: rows_of(&p.map),
        pair_gaps: Some(&p.pair_gaps),
    }));
    run.dir.json("posteriors.json", &records)?;
    #[derive(Serialize)]
    struct Checks<'a> {
        tangent: &'a [(optomo::measurement::ModelTag, f64, f64)],
        linearity_ratio: Option<f64>,
        contraction_holds: bool,
    }
    run.dir.json(
        "checks.json",
        &Checks {
            tangent: &out.tangent,
            linearity_ratio: out.linearity_ratio,
            contraction_holds: out.contraction_holds,
        },
    )?;
    if run.cfg.linearized.export_kernels {
        run.dir.json("kernels.json", &out.kernel_exports(&run.cfg)?)?;
    }
    if !out.contraction_holds {
        run.warnings
            .push("a posterior covariance does not contract the prior".into());
    }
    let guard = if opts.refine {
        let fine = in_pool(opts.threads, || linearized_study(&run.cfg.refined()))?;
        Some(guard_report(
            &out.rows,
            &fine.rows,
            &LINEARIZED_METRICS,
            run.cfg.resolution,
        ))
    } else {
        None
    };
    run.finish(out.studies, guard)
}

pub fn cmd_make_data(cfg_bytes: &[u8], opts: &RunOptions) -> Result<RunReport> {
    let mut run = Run::start("make-data", cfg_bytes, opts)?;
    let data = make_data(&run.cfg)?;
    run.dir.json("data.json", &data)?;
    run.finish(Vec::new(), None)
}
