use std::path::Path;
use std::process::Command;

use optomo::measurement::{MeasurementSetup, QuadraticTrace};
use optomo_harness::commands::{
    cmd_forward, cmd_linearized_compare, cmd_make_data, cmd_posterior_compare, cmd_rates, RunOptions, RunReport,
};
use optomo_harness::config::{fingerprint, ExperimentConfig};
use optomo_harness::HarnessError;
use tempfile::TempDir;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        resolution: 64,
        ordinates: 8,
        epsilons: vec![0.4, 0.2, 0.1, 0.05],
        ..ExperimentConfig::slab_reference()
    }
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out: dir.to_path_buf(),
        seed: None,
        threads: None,
        refine: false,
    }
}

fn with_threads(dir: &Path, n: usize) -> RunOptions {
    RunOptions {
        threads: Some(n),
        ..opts(dir)
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn csv_values(dir: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(dir.join(name)).unwrap();
    r.records().map(|rec| rec.unwrap()[3].parse().unwrap()).collect()
}

fn sweep_value(dir: &Path, stem: &str, metric: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(dir.join(format!("{stem}.csv"))).unwrap();
    r.records()
        .map(|rec| rec.unwrap())
        .filter(|rec| &rec[1] == metric)
        .map(|rec| rec[2].parse().unwrap())
        .collect()
}

fn same_artifacts(a: &Path, b: &Path, report: &RunReport) {
    for name in &report.artifacts {
        assert_eq!(read(a, name), read(b, name), "{name} differs");
    }
}

#[test]
fn constant_traces_give_zero_forward_data() {
    let mut cfg = small();
    cfg.setup.traces = vec![QuadraticTrace::constant(1.0), QuadraticTrace::constant(-2.0)];
    let dir = TempDir::new().unwrap();
    cmd_forward(cfg.to_json().as_bytes(), &opts(dir.path())).unwrap();
    for name in ["forward_DE.csv", "forward_RTE.csv"] {
        let v = csv_values(dir.path(), name);
        assert!(!v.is_empty());
        assert!(v.iter().all(|x| x.abs() < 1e-9), "{name}: {v:?}");
    }
}

#[test]
fn forward_rows_are_detectors_times_sources() {
    let cfg = small();
    let dir = TempDir::new().unwrap();
    cmd_forward(cfg.to_json().as_bytes(), &opts(dir.path())).unwrap();
    let jk = cfg.setup.detector_count() * cfg.setup.trace_count();
    assert_eq!(csv_values(dir.path(), "forward_DE.csv").len(), jk);
    assert_eq!(csv_values(dir.path(), "forward_RTE.csv").len(), jk * cfg.epsilons.len());
}

#[test]
fn forward_is_deterministic_across_runs_and_threads() {
    let bytes = small().to_json();
    let (a, b, c) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    let report = cmd_forward(bytes.as_bytes(), &with_threads(a.path(), 1)).unwrap();
    cmd_forward(bytes.as_bytes(), &with_threads(b.path(), 1)).unwrap();
    cmd_forward(bytes.as_bytes(), &with_threads(c.path(), 4)).unwrap();
    same_artifacts(a.path(), b.path(), &report);
    same_artifacts(a.path(), c.path(), &report);
}

#[test]
fn report_fingerprint_matches_stored_config() {
    let cfg = small();
    let dir = TempDir::new().unwrap();
    let report = cmd_make_data(cfg.to_json().as_bytes(), &opts(dir.path())).unwrap();
    assert_eq!(report.fingerprint, fingerprint(&read(dir.path(), "config.json")));
    let stored: RunReport = serde_json::from_slice(&read(dir.path(), "report.json")).unwrap();
    assert_eq!(stored.fingerprint, report.fingerprint);
    assert!(report.artifacts.contains(&"data.json".to_string()));

    let other = TempDir::new().unwrap();
    let seeded = RunOptions {
        seed: Some(7),
        ..opts(other.path())
    };
    let report2 = cmd_make_data(cfg.to_json().as_bytes(), &seeded).unwrap();
    assert_ne!(report2.fingerprint, report.fingerprint);
    assert_eq!(report2.fingerprint, fingerprint(&read(other.path(), "config.json")));
    let back = ExperimentConfig::from_slice(&read(other.path(), "config.json")).unwrap();
    assert_eq!(back.seed, 7);
}

#[test]
fn rates_need_four_epsilons() {
    let mut cfg = small();
    cfg.epsilons = vec![0.4, 0.2, 0.1];
    let dir = TempDir::new().unwrap();
    let err = cmd_rates(cfg.to_json().as_bytes(), &opts(dir.path())).unwrap_err();
    assert!(matches!(err, HarnessError::Core(_)), "{err}");
}

#[test]
fn rates_write_sweep_summary_plot_and_guard() {
    let dir = TempDir::new().unwrap();
    let o = RunOptions {
        refine: true,
        ..opts(dir.path())
    };
    let mut cfg = small();
    cfg.medium = Some(vec![0.3, -0.2, 0.1]);
    let report = cmd_rates(cfg.to_json().as_bytes(), &o).unwrap();
    let metrics: Vec<&str> = report.studies.iter().map(|s| s.metric.as_str()).collect();
    assert_eq!(metrics, ["r0", "r1", "forward_gap"]);
    assert!(report
        .studies
        .iter()
        .all(|s| s.fingerprint.as_deref() == Some(report.fingerprint.as_str())));
    for name in ["rates.csv", "rates_summary.json", "rates.svg", "refine.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let header = String::from_utf8(read(dir.path(), "rates.csv")).unwrap();
    assert!(header.starts_with("epsilon,metric,value\n"));
    let guard = report.guard.unwrap();
    assert_eq!(guard.fine_resolution, 128);
    assert_eq!(guard.rows.len(), 12);
}

fn posterior_cfg() -> ExperimentConfig {
    let mut cfg = small();
    cfg.bayes.samples = 200;
    cfg
}

#[test]
fn huge_noise_flattens_both_posteriors() {
    let mut cfg = posterior_cfg();
    cfg.setup.noise = 1e3;
    let dir = TempDir::new().unwrap();
    cmd_posterior_compare(cfg.to_json().as_bytes(), &opts(dir.path())).unwrap();
    // Hellinger scales like the square root of KL
    for (metric, tol) in [("kl", 1e-8), ("hellinger", 1e-4)] {
        let v = sweep_value(dir.path(), "posterior", metric);
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| x.abs() < tol), "{metric}: {v:?}");
    }
}

#[test]
fn posterior_compare_is_deterministic_across_threads() {
    let bytes = posterior_cfg().to_json();
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let report = cmd_posterior_compare(bytes.as_bytes(), &with_threads(a.path(), 1)).unwrap();
    cmd_posterior_compare(bytes.as_bytes(), &with_threads(b.path(), 3)).unwrap();
    same_artifacts(a.path(), b.path(), &report);
    assert!(report.artifacts.contains(&"ensembles/eps_3.json".to_string()));
}

#[test]
fn zero_map_leaves_the_prior_untouched() {
    let mut cfg = small();
    cfg.setup = MeasurementSetup {
        traces: vec![QuadraticTrace::constant(1.0)],
        ..MeasurementSetup::slab_reference()
    };
    let dir = TempDir::new().unwrap();
    let report = cmd_linearized_compare(cfg.to_json().as_bytes(), &opts(dir.path())).unwrap();
    assert!(report.studies.is_empty(), "{:?}", report.studies);
    for metric in ["kernel_gap", "map_gap", "hellinger", "mean_gap", "covariance_gap"] {
        let v = sweep_value(dir.path(), "linearized", metric);
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| x.abs() < 1e-9), "{metric}: {v:?}");
    }
    let prior = cfg.prior.covariance::<f64>();
    let records: serde_json::Value = serde_json::from_slice(&read(dir.path(), "posteriors.json")).unwrap();
    for rec in records.as_array().unwrap() {
        let post = &rec["posterior"];
        for (i, m) in post["mean"].as_array().unwrap().iter().enumerate() {
            assert!(m.as_f64().unwrap().abs() < 1e-10, "mean {i}");
        }
        let cov: Vec<Vec<f64>> = serde_json::from_value(post["covariance"].clone()).unwrap();
        for (i, row) in cov.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                assert!((c - prior[(i, j)]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn binary_reports_schema_paths() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        br#"{"geometry": "slab", "resolution": 64, "epsilons": [0.1, 0.2]}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_optomo"))
        .args(["make-data", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epsilons"), "{stderr}");
}

#[test]
fn binary_runs_make_data() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, small().to_json()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_optomo"))
        .args(["make-data", "--threads", "2", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert!(status.success());
    let stored = read(&dir.path().join("out"), "config.json");
    assert_eq!(stored, read(dir.path(), "cfg.json"));
}

#[test]
fn shipped_configs_match_the_references() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, cfg) in [
        ("slab_reference.json", ExperimentConfig::slab_reference()),
        ("square_reference.json", ExperimentConfig::square_reference()),
    ] {
        let (loaded, _) = ExperimentConfig::load(&root.join(name)).unwrap();
        assert_eq!(loaded, cfg, "{name}");
    }
}
