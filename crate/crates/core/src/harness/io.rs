use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::experiment::{CellTrajectory, ExperimentOutput, RunResult};
use super::summary::{metric_value, Comparison, Summary, METRICS};
use crate::error::{FossilError, Result};
use crate::metrics::MetricsReport;

pub const RESULTS_HEADER: &str = "method,tuned,ir,fold,seed,auc,balacc,gmean,precision,recall,f1,specificity,ece,n_eff,static_regret,dynamic_regret,status,seconds";
pub const COMPARISONS_HEADER: &str = "method_a,method_b,metric,wilcoxon_p,permutation_p,n";

/// Results as CSV text. Failed rows leave the metric fields empty.
pub fn results_csv(results: &[RunResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        write!(out, "{},{},{},{},{}", r.method, r.tuned, r.ir, r.fold, r.seed).unwrap();
        for metric in METRICS {
            match r.metrics.as_ref().and_then(|m| metric_value(m, metric)) {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(out, ",{},{}", r.status, r.seconds).unwrap();
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<RunResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(FossilError::InvalidInput("results file has an unexpected header".into()));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| FossilError::InvalidInput(format!("results line {}: bad {what}", k + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 18 {
            return Err(bad("field count"));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let metrics = if f[5].is_empty() {
            None
        } else {
            let v: Vec<f64> = (0..11).map(|j| num(f[5 + j], METRICS[j])).collect::<Result<_>>()?;
            Some(MetricsReport {
                auc: v[0],
                balanced_accuracy: v[1],
                gmean: v[2],
                precision: v[3],
                recall: v[4],
                f1: v[5],
                specificity: v[6],
                ece: v[7],
                n_eff: v[8],
                static_regret: v[9],
                dynamic_regret: v[10],
            })
        };
        out.push(RunResult {
            method: f[0].to_string(),
            tuned: f[1].parse().map_err(|_| bad("tuned"))?,
            ir: num(f[2], "ir")?,
            fold: f[3].parse().map_err(|_| bad("fold"))?,
            seed: f[4].parse().map_err(|_| bad("seed"))?,
            metrics,
            status: f[16].to_string(),
            seconds: num(f[17], "seconds")?,
            error: None,
        });
    }
    Ok(out)
}

pub fn load_results(path: &Path) -> Result<Vec<RunResult>> {
    parse_results_csv(&fs::read_to_string(path)?)
}

/// Writes `results.csv` and `trajectories.jsonl` (one cell per line, in
/// results order) into `dir`.
pub fn write_experiment(output: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(&output.results))?;
    let mut w = fs::File::create(dir.join("trajectories.jsonl"))?;
    for t in &output.trajectories {
        writeln!(w, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<CellTrajectory>> {
    BufReader::new(fs::File::open(path)?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// One comparisons file per imbalance ratio, since the schema has no IR
/// column. Returns the written paths.
pub fn write_comparisons(comparisons: &[Comparison], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut irs: Vec<f64> = comparisons.iter().map(|c| c.ir).collect();
    irs.sort_by(f64::total_cmp);
    irs.dedup();
    let mut paths = Vec::new();
    for ir in irs {
        let mut text = String::from(COMPARISONS_HEADER);
        text.push('\n');
        for c in comparisons.iter().filter(|c| c.ir == ir) {
            writeln!(text, "{},{},{},{},{},{}", c.method_a, c.method_b, c.metric, c.wilcoxon_p, c.permutation_p, c.n).unwrap();
        }
        let path = dir.join(format!("comparisons_ir{ir}.csv"));
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn summary_csv(summary: &Summary) -> String {
    let mut out = String::from("method,tuned,ir,n,failed");
    for m in METRICS {
        write!(out, ",{m}_mean,{m}_std").unwrap();
    }
    out.push_str(",wilcoxon_p,permutation_p\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &summary.rows {
        write!(out, "{},{},{},{},{}", r.method, r.tuned, r.ir, r.n, r.failed).unwrap();
        for m in METRICS {
            let s = r.stat(m);
            write!(out, ",{},{}", opt(s.map(|s| s.mean)), opt(s.map(|s| s.std))).unwrap();
        }
        writeln!(out, ",{},{}", opt(r.wilcoxon_p), opt(r.permutation_p)).unwrap();
    }
    out
}
