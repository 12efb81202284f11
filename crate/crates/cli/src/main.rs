use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fossil::bilevel::{run_bilevel, CgConfig, InnerConfig, MlpProblem, UpperState};
use fossil::data::generate_detailed;
use fossil::harness::config::{ExperimentConfig, MethodEntry, MethodName};
use fossil::harness::experiment::{prepare_splits, run_experiment};
use fossil::harness::figures::emit_figures;
use fossil::harness::io::{load_results, summary_csv, write_comparisons, write_experiment};
use fossil::harness::summary::{compare, render_table, summarize, METRICS, REFERENCE};
use fossil::harness::theory::{run_suite, SUITES};
use fossil::net::{init_params, LossKind, MlpSpec};

#[derive(Parser)]
#[command(name = "fossil", version, about = "Sample weighting experiments for imbalanced binary classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic imbalanced dataset as CSV.
    Gen(GenArgs),
    /// Run every (method, imbalance ratio, fold, seed) cell of an experiment.
    Run(RunArgs),
    /// Paired significance tests of every method against the reference.
    Stats(StatsArgs),
    /// Render per-metric SVG panels from a results file.
    Plot(PlotArgs),
    /// Run named invariant suites and print a pass/fail table.
    TheoryCheck(TheoryArgs),
    /// Learn per-sample weights by implicit differentiation on one dataset.
    Bilevel(BilevelArgs),
}

/// Fields shared by every subcommand that builds an experiment config.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// 0 for a single stratified split, otherwise the number of folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated imbalance ratios (majority:minority).
    #[arg(long = "irs", value_delimiter = ',')]
    imbalance_ratios: Option<Vec<f64>>,
    /// Comma-separated methods: fossil, erm, static, focal, metaweight, curriculum.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Use each method's default rather than tuned hyperparameters.
    #[arg(long)]
    untuned: bool,
    #[arg(long)]
    n_samples: Option<usize>,
    /// Enable minority-class jitter augmentation of the training split.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Fill the seconds column with wall-clock time (makes output nondeterministic).
    #[arg(long)]
    record_timing: bool,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = &self.imbalance_ratios {
            cfg.imbalance_ratios = v.clone();
        }
        if let Some(names) = &self.methods {
            cfg.methods = names.iter().map(|n| parse_method(n).map(MethodEntry::new)).collect::<anyhow::Result<_>>()?;
        }
        if self.untuned {
            cfg.methods = cfg.methods.into_iter().map(MethodEntry::untuned).collect();
        }
        if let Some(v) = self.n_samples {
            cfg.data.n_samples = v;
        }
        if self.augment {
            cfg.augmentation.enabled = true;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if self.record_timing {
            cfg.record_timing = true;
        }
        cfg.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 9.0)]
    ir: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    results: PathBuf,
    /// Comma-separated metrics to test.
    #[arg(long, value_delimiter = ',', default_value = "balacc,gmean,auc,f1")]
    metrics: Vec<String>,
    #[arg(long, default_value = REFERENCE)]
    reference: String,
    /// Directory for the comparisons files; defaults to the results directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "balacc,gmean,recall,auc")]
    metrics: Vec<String>,
    #[arg(long, default_value = "figures")]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Suite name, or `all`.
    suite: String,
}

#[derive(Args)]
struct BilevelArgs {
    #[arg(long, default_value_t = 9.0)]
    ir: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    n_samples: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    inner_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    inner_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    damping: f64,
    #[arg(long, default_value_t = 100)]
    cg_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    cg_tol: f64,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    hidden: Vec<usize>,
    /// Per-epoch records as JSON lines; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_error(msg: String) -> anyhow::Error {
    anyhow::anyhow!("invalid configuration: {msg}")
}

fn parse_method(name: &str) -> anyhow::Result<MethodName> {
    serde_json::from_value(serde_json::Value::String(name.trim().to_lowercase()))
        .map_err(|_| config_error(format!("unknown method {name:?}")))
}

fn check_metrics(metrics: &[String]) -> anyhow::Result<Vec<&str>> {
    metrics
        .iter()
        .map(|m| {
            METRICS
                .iter()
                .copied()
                .find(|k| *k == m.as_str())
                .ok_or_else(|| config_error(format!("unknown metric {m:?}; expected one of {}", METRICS.join(", "))))
        })
        .collect()
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Success,
    Partial,
}

fn gen(args: GenArgs) -> anyhow::Result<Outcome> {
    let cfg = args.cfg.build()?;
    let spec = cfg.gen_spec(args.ir, args.seed);
    spec.validate().map_err(|e| config_error(e.to_string()))?;
    let generated = generate_detailed(&spec)?;
    generated.dataset.save_csv(&args.out)?;
    let [neg, pos] = generated.dataset.class_counts();
    eprintln!("wrote {} rows ({neg} majority, {pos} minority) to {}", generated.dataset.len(), args.out.display());
    Ok(Outcome::Success)
}

fn run(args: RunArgs) -> anyhow::Result<Outcome> {
    let mut cfg = args.cfg.build()?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    eprintln!("running {} cells into {}", cfg.n_cells(), cfg.output_dir.display());
    let output = run_experiment(&cfg)?;
    write_experiment(&output, &cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.json"), cfg.to_json()?)?;
    let summary = summarize(&output.results, REFERENCE)?;
    fs::write(cfg.output_dir.join("summary.csv"), summary_csv(&summary))?;
    println!("{}", render_table(&summary, &["balacc", "gmean", "auc", "f1"]));
    for note in &summary.missing {
        eprintln!("warning: {note}");
    }
    for r in output.results.iter().filter(|r| !r.is_ok()) {
        eprintln!(
            "failed: {} ir {} fold {} seed {}: {}",
            r.method,
            r.ir,
            r.fold,
            r.seed,
            r.error.as_deref().unwrap_or("unknown error")
        );
    }
    Ok(if output.failures() > 0 { Outcome::Partial } else { Outcome::Success })
}

fn stats(args: StatsArgs) -> anyhow::Result<Outcome> {
    let metrics = check_metrics(&args.metrics)?;
    let results = load_results(&args.results).with_context(|| format!("reading {}", args.results.display()))?;
    let summary = summarize(&results, &args.reference)?;
    println!("{}", render_table(&summary, &metrics));
    let comparisons = compare(&results, &args.reference, &metrics)?;
    let dir = args.out.unwrap_or_else(|| args.results.parent().map(PathBuf::from).unwrap_or_default());
    for path in write_comparisons(&comparisons, &dir)? {
        eprintln!("wrote {}", path.display());
    }
    for note in &summary.missing {
        eprintln!("warning: {note}");
    }
    Ok(if summary.missing.is_empty() { Outcome::Success } else { Outcome::Partial })
}

fn plot(args: PlotArgs) -> anyhow::Result<Outcome> {
    let metrics = check_metrics(&args.metrics)?;
    let results = load_results(&args.results).with_context(|| format!("reading {}", args.results.display()))?;
    let report = emit_figures(&results, &metrics, &args.out)?;
    for f in &report.files {
        eprintln!("wrote {}", f.display());
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(Outcome::Success)
}

fn theory_check(args: TheoryArgs) -> anyhow::Result<Outcome> {
    let names: Vec<&str> = if args.suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&args.suite.as_str()) {
        vec![args.suite.as_str()]
    } else {
        bail!(config_error(format!("unknown suite {:?}; expected all or one of {}", args.suite, SUITES.join(", "))));
    };
    let mut all_passed = true;
    let mut first = true;
    for name in names {
        let report = run_suite(name)?;
        let table = report.to_table();
        // Print the header once when several suites run.
        let body = if first { table.as_str() } else { table.split_once('\n').map_or("", |(_, rest)| rest) };
        print!("{body}");
        first = false;
        all_passed &= report.passed();
    }
    Ok(if all_passed { Outcome::Success } else { Outcome::Partial })
}

fn bilevel(args: BilevelArgs) -> anyhow::Result<Outcome> {
    let cfg = ExperimentConfig {
        seeds: vec![args.seed],
        imbalance_ratios: vec![args.ir],
        hidden_layers: args.hidden.clone(),
        data: fossil::harness::config::DataConfig { n_samples: args.n_samples, ..Default::default() },
        ..ExperimentConfig::default()
    };
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let split = prepare_splits(&cfg, args.ir, args.seed)?.remove(0);
    let spec = MlpSpec::new(cfg.layer_sizes())?;
    let problem = MlpProblem { spec: spec.clone(), train: split.train.to_batch()?, val: split.test.to_batch()?, loss: LossKind::Bce };
    let n_aug = split.train.aug_flags().iter().filter(|&&a| a).count();
    let mut state = UpperState::new(split.train.len(), n_aug);
    let mut theta = init_params(&spec, args.seed).into_vec();
    let inner = InnerConfig { steps: args.inner_steps, lr: args.inner_lr };
    let cg = CgConfig { damping: args.damping, max_iter: args.cg_iters, tol: args.cg_tol };
    let records = run_bilevel(&problem, &mut theta, args.epochs, &inner, &mut state, &cg)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, &text)?,
        None => print!("{text}"),
    }
    let failures = records.iter().filter(|r| r.failure.is_some()).count();
    if failures > 0 {
        eprintln!("warning: {failures} of {} epochs skipped the upper update after a failed linear solve", records.len());
    }
    Ok(if failures > 0 { Outcome::Partial } else { Outcome::Success })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Stats(a) => stats(a),
        Command::Plot(a) => plot(a),
        Command::TheoryCheck(a) => theory_check(a),
        Command::Bilevel(a) => bilevel(a),
    };
    // 0 success, 1 configuration or input error, 2 some cells, checks or
    // solves failed while the rest completed.
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
