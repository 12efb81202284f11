use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fossil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fossil")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY: [&str; 10] = ["--methods", "fossil,erm", "--seeds", "42,77", "--irs", "4", "--epochs", "2", "--n-samples", "200"];

fn run_tiny(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    fossil(&args)
}

#[test]
fn gen_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let out = fossil(&["gen", "--ir", "4", "--n-samples", "200", "--out", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().ends_with("label,aug_flag,origin"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 200);
    let minority = rows.iter().filter(|r| r.split(',').nth(20) == Some("1")).count();
    assert!((30..=50).contains(&minority), "{minority}");
}

#[test]
fn run_is_byte_identical_across_reruns_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = run_tiny(a.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&run_tiny(b.path(), &["--threads", "1"])), 0);
    let first = fs::read_to_string(a.path().join("results.csv")).unwrap();
    assert_eq!(first, fs::read_to_string(b.path().join("results.csv")).unwrap());
    let lines: Vec<&str> = first.lines().collect();
    assert!(lines[0].starts_with("method,tuned,ir,fold,seed,auc,balacc"));
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("erm,false,4,0,42,"));
    assert!(lines[4].starts_with("fossil,true,4,0,77,"));
    assert!(a.path().join("trajectories.jsonl").exists());
    assert!(a.path().join("summary.csv").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 1, "seeds": [5], "imbalance_ratios": [9], "methods": [{"method": "static"}], "data": {"n_samples": 150}}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = fossil(&["run", "--config", cfg.to_str().unwrap(), "--epochs", "3", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(out_dir.join("trajectories.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 1);
    assert_eq!(traj.matches("\"epoch\"").count(), 3);
    assert!(fs::read_to_string(out_dir.join("results.csv")).unwrap().contains("\nstatic,false,9,0,5,"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&fossil(&["run", "--out", d, "--epochs", "0"])), 1);
    assert_eq!(code(&fossil(&["run", "--out", d, "--methods", "svm"])), 1);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"epochs": 2, "colour": "red"}"#).unwrap();
    assert_eq!(code(&fossil(&["run", "--config", cfg.to_str().unwrap()])), 1);
    assert_eq!(code(&fossil(&["theory-check", "nope"])), 1);
    assert_eq!(code(&fossil(&["plot", "--results", "/nonexistent/results.csv"])), 1);
}

#[test]
fn stats_and_plot_read_a_results_file() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_tiny(dir.path(), &[])), 0);
    let results = dir.path().join("results.csv");
    let out = fossil(&["stats", "--results", results.to_str().unwrap(), "--metrics", "balacc,recall"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cmp = fs::read_to_string(dir.path().join("comparisons_ir4.csv")).unwrap();
    let lines: Vec<&str> = cmp.lines().collect();
    assert_eq!(lines[0], "method_a,method_b,metric,wilcoxon_p,permutation_p,n");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("fossil,erm,balacc,"));

    let figs = dir.path().join("figs");
    let out = fossil(&["plot", "--results", results.to_str().unwrap(), "--out", figs.to_str().unwrap(), "--metrics", "balacc,gmean"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(figs.join("balacc_ir4.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="seed-dot""#).count(), 4);
    assert!(figs.join("gmean_ir4.svg").exists());
}

#[test]
fn theory_check_reports_pass_and_fail() {
    let out = fossil(&["theory-check", "reductions"]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("suite\tcheck\tstatus"));
    assert_eq!(table.lines().filter(|l| l.contains("\tPASS\t")).count(), 3);

    let out = fossil(&["theory-check", "monotonicity"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8(out.stdout).unwrap().contains("\tFAIL\t"));
}

fn bilevel_records(extra: &[&str]) -> (i32, Vec<serde_json::Value>) {
    let mut args = vec!["bilevel", "--n-samples", "120", "--epochs", "2", "--hidden", "4"];
    args.extend(extra);
    let out = fossil(&args);
    let status = code(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    (status, text.lines().map(|l| serde_json::from_str(l).unwrap()).collect())
}

#[test]
fn bilevel_mode_updates_weights_when_the_solve_succeeds() {
    let (status, records) = bilevel_records(&["--inner-steps", "200", "--inner-lr", "0.01", "--damping", "0.1"]);
    assert_eq!(status, 0);
    assert_eq!(records.len(), 2);
    for r in &records {
        assert!(r["val_loss"].as_f64().unwrap().is_finite());
        assert!(r["cg_residual"].as_f64().unwrap() <= 1e-8);
        assert!(r["failure"].is_null());
    }
    let w = &records[1]["w"];
    assert!(w["max"].as_f64().unwrap() > w["min"].as_f64().unwrap());
    assert!((w["mean"].as_f64().unwrap() - 1.0 / 96.0).abs() < 1e-12);
}

#[test]
fn bilevel_mode_records_failed_solves_and_exits_with_two() {
    // Five inner steps leave the network far from a minimizer, where the
    // lightly damped training Hessian has negative curvature.
    let (status, records) = bilevel_records(&["--inner-steps", "5"]);
    assert_eq!(status, 2);
    assert_eq!(records.len(), 2);
    for r in &records {
        assert!(r["failure"].as_str().unwrap().contains("curvature"));
        assert_eq!(r["w"]["min"], r["w"]["max"]);
    }
}
