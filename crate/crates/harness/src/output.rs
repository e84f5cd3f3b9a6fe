//! CSV, JSON and SVG artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use optomo::asymptotics::RateStudy;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::studies::{series, SweepRow};

/// Collects the files written by one command.
#[derive(Debug)]
pub struct ArtifactDir {
    root: PathBuf,
    written: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
        Ok(ArtifactDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn into_written(self) -> Vec<String> {
        self.written
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::io(&self.root.join(name), e.into_error()))?;
        self.bytes(name, &bytes)
    }

    /// Sweep CSV, summary JSON and log-log plot for a set of fitted metrics.
    pub fn sweep(&mut self, stem: &str, rows: &[SweepRow], studies: &[RateStudy]) -> Result<()> {
        self.csv(&format!("{stem}.csv"), rows)?;
        let summary: Vec<FitSummary> = studies.iter().map(FitSummary::from).collect();
        self.json(&format!("{stem}_summary.json"), &summary)?;
        let svg = loglog_svg(stem, rows, studies);
        self.bytes(&format!("{stem}.svg"), svg.as_bytes())
    }
}

/// Fitted line of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
}

impl From<&RateStudy> for FitSummary {
    fn from(s: &RateStudy) -> Self {
        FitSummary {
            metric: s.metric.clone(),
            slope: s.slope,
            intercept: s.intercept,
            r2: s.r2,
            n_points: s.n_points(),
        }
    }
}

const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Log-log plot of each fitted metric with its least-squares line.
pub fn loglog_svg(title: &str, rows: &[SweepRow], studies: &[RateStudy]) -> String {
    let (w, h, pad) = (640.0, 440.0, 60.0);
    let pts: Vec<(f64, f64)> = studies
        .iter()
        .flat_map(|s| series(rows, &s.metric))
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .map(|(e, v)| (e.log10(), v.log10()))
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#,
        w / 2.0
    );
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        l = pad,
        t = pad,
        b = h - pad,
        r = w - pad
    );
    for d in (x0.floor() as i32)..=(x1.ceil() as i32) {
        let x = d as f64;
        if x >= x0 && x <= x1 {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">1e{d}</text>"#,
                sx(x),
                h - pad + 16.0
            );
        }
    }
    for d in (y0.floor() as i32)..=(y1.ceil() as i32) {
        let y = d as f64;
        if y >= y0 && y <= y1 {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">1e{d}</text>"#,
                pad - 6.0,
                sy(y) + 4.0
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">epsilon</text>"#,
        w / 2.0,
        h - 12.0
    );
    for (i, s) in studies.iter().enumerate() {
        let c = COLOURS[i % COLOURS.len()];
        let data: Vec<(f64, f64)> = series(rows, &s.metric)
            .into_iter()
            .filter(|p| p.0 > 0.0 && p.1 > 0.0)
            .map(|(e, v)| (e.log10(), v.log10()))
            .collect();
        let mut d = String::new();
        for (k, p) in data.iter().enumerate() {
            let _ = write!(d, "{}{:.2} {:.2} ", if k == 0 { "M" } else { "L" }, sx(p.0), sy(p.1));
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
                sx(p.0),
                sy(p.1)
            );
        }
        let _ = writeln!(svg, r#"<path d="{}" fill="none" stroke="{c}"/>"#, d.trim_end());
        // fitted line in natural logs, drawn in log10 coordinates
        let line = |x: f64| (s.intercept + s.slope * x * std::f64::consts::LN_10) / std::f64::consts::LN_10;
        if let (Some(a), Some(b)) = (data.first(), data.last()) {
            let _ = writeln!(
                svg,
                r#"<path d="M{:.2} {:.2} L{:.2} {:.2}" fill="none" stroke="{c}" stroke-dasharray="4 3"/>"#,
                sx(a.0),
                sy(line(a.0).clamp(y0, y1)),
                sx(b.0),
                sy(line(b.0).clamp(y0, y1))
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{c}">{} slope {:.3}</text>"#,
            pad + 10.0,
            pad + 16.0 * (i as f64 + 1.0),
            s.metric,
            s.slope
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}
