//! Static SVG panels: per-seed dots, a box over the quartiles, and a mean
//! marker for each method.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::{OrdF64, RunResult};
use super::summary::{metric_value, METRICS};
use crate::error::{FossilError, Result};
use crate::seed::derive_seed;
use crate::weighting::quantile;

#[derive(Clone, Debug, Default)]
pub struct FigureReport {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

const GROUP_WIDTH: f64 = 110.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 50.0;
const PLOT_HEIGHT: f64 = 260.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Horizontal offset in [-1, 1] that depends only on the point's identity.
fn jitter(method: &str, fold: usize, seed: u64) -> f64 {
    let h = derive_seed(seed, &[fold as u64, crate::seed::tag(method)]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Renders one panel: one group per method in first-appearance order.
pub fn render_panel(results: &[&RunResult], metric: &str, title: &str) -> Result<String> {
    if !METRICS.contains(&metric) {
        return Err(FossilError::InvalidInput(format!("unknown metric {metric}")));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in results {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let value = |r: &RunResult| r.metrics.as_ref().and_then(|m| metric_value(m, metric));
    let all: Vec<f64> = results.iter().filter_map(|r| value(r)).collect();
    let (mut lo, mut hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Err(FossilError::InvalidInput(format!("no values for {metric}")));
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    lo -= pad;
    hi += pad;
    let y = |v: f64| TOP + PLOT_HEIGHT * (1.0 - (v - lo) / (hi - lo));

    let width = LEFT + GROUP_WIDTH * methods.len() as f64 + 20.0;
    let height = TOP + PLOT_HEIGHT + 60.0;
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, escape(title)).unwrap();
    writeln!(s, r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="#333"/>"##, TOP + PLOT_HEIGHT).unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let yy = y(v);
        writeln!(s, r##"<line x1="{:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/>"##, LEFT, width - 20.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, LEFT - 6.0, yy + 4.0).unwrap();
    }

    for (g, method) in methods.iter().enumerate() {
        let cx = LEFT + GROUP_WIDTH * (g as f64 + 0.5);
        let rows: Vec<&&RunResult> = results.iter().filter(|r| r.method == *method).collect();
        let vals: Vec<f64> = rows.iter().filter_map(|r| value(r)).collect();
        writeln!(s, r#"<g class="method-group" data-method="{}">"#, escape(method)).unwrap();
        if !vals.is_empty() {
            let (q1, med, q3) = (quantile(&vals, 0.25), quantile(&vals, 0.5), quantile(&vals, 0.75));
            let (vmin, vmax) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            writeln!(s, r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#555"/>"##, y(vmax), y(vmin)).unwrap();
            writeln!(
                s,
                r##"<rect class="box" x="{:.1}" y="{:.1}" width="40" height="{:.1}" fill="#cfe0f3" stroke="#3a6ea5"/>"##,
                cx - 20.0,
                y(q3),
                (y(q1) - y(q3)).max(0.5)
            )
            .unwrap();
            writeln!(s, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#3a6ea5" stroke-width="2"/>"##, cx - 20.0, y(med), cx + 20.0, y(med)).unwrap();
            for r in &rows {
                if let Some(v) = value(r) {
                    let dx = 32.0 + 8.0 * jitter(method, r.fold, r.seed);
                    writeln!(s, r##"<circle class="seed-dot" cx="{:.1}" cy="{:.1}" r="3" fill="#d9534f" fill-opacity="0.8"/>"##, cx + dx, y(v)).unwrap();
                }
            }
            let my = y(mean);
            writeln!(
                s,
                r#"<path class="mean-marker" d="M {:.1} {my:.1} L {cx:.1} {:.1} L {:.1} {my:.1} L {cx:.1} {:.1} Z" fill="black"/>"#,
                cx - 6.0,
                my - 6.0,
                cx + 6.0,
                my + 6.0
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + PLOT_HEIGHT + 22.0, escape(method)).unwrap();
        writeln!(s, "</g>").unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

/// One SVG per (metric, imbalance ratio), named `{metric}_ir{ir}.svg`.
/// Metrics with no successful values are skipped with a warning.
pub fn emit_figures(results: &[RunResult], metrics: &[&str], out_dir: &Path) -> Result<FigureReport> {
    let mut report = FigureReport::default();
    if metrics.is_empty() {
        report.warnings.push("no metric panels requested; nothing written".into());
        return Ok(report);
    }
    let irs: BTreeSet<OrdF64> = results.iter().map(|r| OrdF64(r.ir)).collect();
    for &metric in metrics {
        if !METRICS.contains(&metric) {
            return Err(FossilError::InvalidInput(format!("unknown metric {metric}")));
        }
        for ir in &irs {
            let rows: Vec<&RunResult> = results.iter().filter(|r| r.ir == ir.0).collect();
            if !rows.iter().any(|r| r.metrics.is_some()) {
                report.warnings.push(format!("{metric} at IR {}: no successful runs; panel skipped", ir.0));
                continue;
            }
            fs::create_dir_all(out_dir)?;
            let svg = render_panel(&rows, metric, &format!("{metric} (IR {}:1)", ir.0))?;
            let path = out_dir.join(format!("{metric}_ir{}.svg", ir.0));
            fs::write(&path, svg)?;
            report.files.push(path);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsReport;

    fn results() -> Vec<RunResult> {
        let mut out = Vec::new();
        for m in ["fossil", "erm", "static", "focal", "metaweight", "curriculum"] {
            for seed in [1, 2, 3] {
                out.push(RunResult {
                    method: m.into(),
                    tuned: true,
                    ir: 9.0,
                    fold: 0,
                    seed,
                    metrics: Some(MetricsReport {
                        balanced_accuracy: 0.7 + 0.01 * seed as f64,
                        recall: 0.5,
                        gmean: 0.6,
                        auc: 0.8 + 0.02 * seed as f64,
                        ..Default::default()
                    }),
                    status: "ok".into(),
                    seconds: 0.0,
                    error: None,
                });
            }
        }
        out
    }

    #[test]
    fn one_file_per_metric_with_all_groups_and_dots() {
        let dir = tempfile::tempdir().unwrap();
        let rs = results();
        let report = emit_figures(&rs, &["balacc", "gmean", "recall", "auc"], dir.path()).unwrap();
        assert_eq!(report.files.len(), 4);
        for f in &report.files {
            let svg = fs::read_to_string(f).unwrap();
            assert!(svg.contains(r#"version="1.1""#));
            assert_eq!(svg.matches(r#"class="method-group""#).count(), 6);
            assert_eq!(svg.matches(r#"class="seed-dot""#).count(), rs.len());
            assert_eq!(svg.matches("<g ").count(), svg.matches("</g>").count());
        }
        let again = emit_figures(&rs, &["balacc"], dir.path()).unwrap();
        assert_eq!(fs::read(&again.files[0]).unwrap(), fs::read(&report.files[0]).unwrap());
    }

    #[test]
    fn empty_request_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let report = emit_figures(&results(), &[], dir.path()).unwrap();
        assert!(report.files.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(emit_figures(&results(), &["bogus"], dir.path()).is_err());
    }
}
