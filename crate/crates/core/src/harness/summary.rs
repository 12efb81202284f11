use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::experiment::{OrdF64, RunResult};
use crate::error::{FossilError, Result};
use crate::metrics::MetricsReport;
use crate::stats::{permutation_test, wilcoxon_exact};

/// Metric column names in results-file order.
pub const METRICS: [&str; 11] = [
    "auc",
    "balacc",
    "gmean",
    "precision",
    "recall",
    "f1",
    "specificity",
    "ece",
    "n_eff",
    "static_regret",
    "dynamic_regret",
];

pub const REFERENCE: &str = "fossil";
pub const PERMUTATION_SHUFFLES: usize = 10_000;
pub const PERMUTATION_SEED: u64 = 20_250;

pub fn metric_value(m: &MetricsReport, name: &str) -> Option<f64> {
    Some(match name {
        "auc" => m.auc,
        "balacc" => m.balanced_accuracy,
        "gmean" => m.gmean,
        "precision" => m.precision,
        "recall" => m.recall,
        "f1" => m.f1,
        "specificity" => m.specificity,
        "ece" => m.ece,
        "n_eff" => m.n_eff,
        "static_regret" => m.static_regret,
        "dynamic_regret" => m.dynamic_regret,
        _ => return None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub tuned: bool,
    pub ir: f64,
    /// Successful runs in the cell.
    pub n: usize,
    pub failed: usize,
    pub stats: BTreeMap<String, MeanStd>,
    /// Paired tests of balanced accuracy against the reference method; the
    /// reference row itself carries none.
    pub wilcoxon_p: Option<f64>,
    pub permutation_p: Option<f64>,
}

impl SummaryRow {
    pub fn stat(&self, metric: &str) -> Option<MeanStd> {
        self.stats.get(metric).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Method the p-values compare against.
    pub reference: String,
    pub rows: Vec<SummaryRow>,
    /// Human-readable notes on failed or absent runs.
    pub missing: Vec<String>,
}

impl Summary {
    pub fn row(&self, method: &str, ir: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.ir == ir)
    }
}

type Key = (String, OrdF64);

fn grouped(results: &[RunResult]) -> BTreeMap<Key, Vec<&RunResult>> {
    let mut groups: BTreeMap<Key, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.method.clone(), OrdF64(r.ir))).or_default().push(r);
    }
    groups
}

/// Values of `metric` keyed by (fold, seed) for successful runs.
fn by_run(rows: &[&RunResult], metric: &str) -> BTreeMap<(usize, u64), f64> {
    rows.iter()
        .filter_map(|r| Some(((r.fold, r.seed), metric_value(r.metrics.as_ref()?, metric)?)))
        .collect()
}

fn paired(a: &BTreeMap<(usize, u64), f64>, b: &BTreeMap<(usize, u64), f64>) -> (Vec<f64>, Vec<f64>) {
    a.iter().filter_map(|(k, x)| Some((*x, *b.get(k)?))).unzip()
}

/// Mean and sample std per (method, ir) for every metric, plus balanced
/// accuracy p-values against `reference`.
pub fn summarize(results: &[RunResult], reference: &str) -> Result<Summary> {
    if results.is_empty() {
        return Err(FossilError::InvalidInput("no results to summarize".into()));
    }
    let groups = grouped(results);
    let all_runs: BTreeSet<(usize, u64)> = results.iter().map(|r| (r.fold, r.seed)).collect();
    let methods: BTreeSet<&str> = results.iter().map(|r| r.method.as_str()).collect();
    let irs: BTreeSet<OrdF64> = results.iter().map(|r| OrdF64(r.ir)).collect();

    let mut missing = Vec::new();
    for &m in &methods {
        for ir in &irs {
            match groups.get(&(m.to_string(), *ir)) {
                None => missing.push(format!("{m} at IR {}: no runs", ir.0)),
                Some(rows) => {
                    let have: BTreeSet<(usize, u64)> = rows.iter().map(|r| (r.fold, r.seed)).collect();
                    for (fold, seed) in all_runs.difference(&have) {
                        missing.push(format!("{m} at IR {}: fold {fold} seed {seed} absent", ir.0));
                    }
                    for r in rows.iter().filter(|r| !r.is_ok()) {
                        missing.push(format!("{m} at IR {}: fold {} seed {} failed", ir.0, r.fold, r.seed));
                    }
                }
            }
        }
    }

    let mut rows = Vec::new();
    for ((method, ir), group) in &groups {
        let ok: Vec<&RunResult> = group.iter().copied().filter(|r| r.is_ok()).collect();
        let mut stats = BTreeMap::new();
        for metric in METRICS {
            let values: Vec<f64> = ok.iter().filter_map(|r| metric_value(r.metrics.as_ref()?, metric)).collect();
            if let Some(s) = MeanStd::of(&values) {
                stats.insert(metric.to_string(), s);
            }
        }
        let (mut wilcoxon_p, mut permutation_p) = (None, None);
        if method != reference {
            if let Some(reference_rows) = groups.get(&(reference.to_string(), *ir)) {
                let (a, b) = paired(&by_run(&ok, "balacc"), &by_run(reference_rows, "balacc"));
                if !a.is_empty() {
                    wilcoxon_p = Some(wilcoxon_exact(&a, &b)?.p);
                    permutation_p = Some(permutation_test(&a, &b, PERMUTATION_SHUFFLES, PERMUTATION_SEED)?);
                }
            }
        }
        rows.push(SummaryRow {
            method: method.clone(),
            tuned: group.iter().any(|r| r.tuned),
            ir: ir.0,
            n: ok.len(),
            failed: group.len() - ok.len(),
            stats,
            wilcoxon_p,
            permutation_p,
        });
    }
    Ok(Summary { reference: reference.to_string(), rows, missing })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub ir: f64,
    pub metric: String,
    pub wilcoxon_p: f64,
    pub permutation_p: f64,
    pub n: usize,
}

/// Paired tests of every method against `reference` on each metric and IR.
pub fn compare(results: &[RunResult], reference: &str, metrics: &[&str]) -> Result<Vec<Comparison>> {
    let groups = grouped(results);
    let mut out = Vec::new();
    for ((method, ir), rows) in &groups {
        if method == reference {
            continue;
        }
        let Some(reference_rows) = groups.get(&(reference.to_string(), *ir)) else { continue };
        for &metric in metrics {
            if !METRICS.contains(&metric) {
                return Err(FossilError::InvalidInput(format!("unknown metric {metric}")));
            }
            let (a, b) = paired(&by_run(reference_rows, metric), &by_run(rows, metric));
            if a.is_empty() {
                continue;
            }
            out.push(Comparison {
                method_a: reference.to_string(),
                method_b: method.clone(),
                ir: ir.0,
                metric: metric.to_string(),
                wilcoxon_p: wilcoxon_exact(&a, &b)?.p,
                permutation_p: permutation_test(&a, &b, PERMUTATION_SHUFFLES, PERMUTATION_SEED)?,
                n: a.len(),
            });
        }
    }
    Ok(out)
}

/// Plain-text table of mean +- std for the chosen metrics.
pub fn render_table(summary: &Summary, metrics: &[&str]) -> String {
    let mut out = format!("{:<14} {:>5} {:>3}", "method", "ir", "n");
    for m in metrics {
        out.push_str(&format!(" {:>17}", m));
    }
    out.push_str(&format!(" {:>9} {:>9}\n", "wilcoxon", "perm"));
    for r in &summary.rows {
        out.push_str(&format!("{:<14} {:>5} {:>3}", r.method, r.ir, r.n));
        for m in metrics {
            match r.stat(m) {
                Some(s) => out.push_str(&format!(" {:>8.4} ± {:<6.4}", s.mean, s.std)),
                None => out.push_str(&format!(" {:>17}", "-")),
            }
        }
        let none = if r.method == summary.reference { "reference" } else { "-" };
        let p = |v: Option<f64>| v.map_or(none.to_string(), |p| format!("{p:.4}"));
        out.push_str(&format!(" {:>9} {:>9}\n", p(r.wilcoxon_p), p(r.permutation_p)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, balacc: f64) -> RunResult {
        RunResult {
            method: method.into(),
            tuned: true,
            ir: 9.0,
            fold: 0,
            seed,
            metrics: Some(MetricsReport { balanced_accuracy: balacc, ..Default::default() }),
            status: "ok".into(),
            seconds: 0.0,
            error: None,
        }
    }

    #[test]
    fn mean_std_examples() {
        let one = MeanStd::of(&[0.7]).unwrap();
        assert_eq!((one.mean, one.std), (0.7, 0.0));
        let two = MeanStd::of(&[0.8, 0.9]).unwrap();
        assert!((two.mean - 0.85).abs() < 1e-12);
        assert!((two.std - 0.070_710_678_118_654_76).abs() < 1e-6);
    }

    #[test]
    fn reference_row_has_no_p_values() {
        let mut results: Vec<RunResult> = (0..5).map(|s| row("fossil", s, 0.8 + 0.01 * s as f64)).collect();
        results.extend((0..5).map(|s| row("erm", s, 0.7 + 0.01 * s as f64)));
        let summary = summarize(&results, REFERENCE).unwrap();
        assert!(summary.row("fossil", 9.0).unwrap().wilcoxon_p.is_none());
        let erm = summary.row("erm", 9.0).unwrap();
        assert_eq!(erm.wilcoxon_p, Some(0.0625));
        assert!(summary.missing.is_empty());
        let table = render_table(&summary, &["balacc"]);
        assert_eq!(table.matches("reference").count(), 2, "{table}");
        let other = summarize(&results, "softmax").unwrap();
        assert!(!render_table(&other, &["balacc"]).contains("reference"));
        let cmp = compare(&results, REFERENCE, &["balacc"]).unwrap();
        assert_eq!(cmp.len(), 1);
        assert_eq!((cmp[0].method_b.as_str(), cmp[0].n), ("erm", 5));
    }

    #[test]
    fn failed_and_absent_runs_are_reported() {
        let mut results = vec![row("fossil", 1, 0.8), row("fossil", 2, 0.8), row("erm", 1, 0.7)];
        let mut failed = row("erm", 3, 0.0);
        failed.metrics = None;
        failed.status = "failed".into();
        results.push(failed);
        let summary = summarize(&results, REFERENCE).unwrap();
        assert_eq!(summary.row("erm", 9.0).unwrap().n, 1);
        assert_eq!(summary.row("erm", 9.0).unwrap().failed, 1);
        assert!(summary.missing.iter().any(|m| m.contains("erm") && m.contains("seed 2 absent")));
        assert!(summary.missing.iter().any(|m| m.contains("seed 3 failed")));
        assert!(summarize(&[], REFERENCE).is_err());
    }
}
