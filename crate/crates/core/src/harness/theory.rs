//! Named invariant suites. Each check reports a measured value next to the
//! threshold it is judged against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, ExperimentConfig, MethodEntry, MethodName};
use super::experiment::run_experiment;
use crate::baselines::{curriculum_weights, CurriculumSchedule};
use crate::bilevel::{cg_solve, drifting_stream, hypergradient, iid_stream, ogd_toy_regret, CgConfig, OgdToy, QuadraticToy, UpperState, BilevelProblem};
use crate::error::{FossilError, Result};
use crate::metrics::effective_sample_size;
use crate::net::{self, Batch, LossKind, MlpSpec};
use crate::weighting::{class_term, gamma_at, temperature_at, weights_with_schedule, warmup_at, FossilConfig, ScheduleValues};

pub const SUITES: [&str; 7] = ["boundedness", "monotonicity", "reductions", "stability", "regret_toy", "hvp_cg", "neff"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: value <= threshold, value, threshold, detail }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: value >= threshold, value, threshold, detail }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Tab-separated `suite check status value threshold detail` lines.
    pub fn to_table(&self) -> String {
        let mut out = String::from("suite\tcheck\tstatus\tvalue\tthreshold\tdetail\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:e}\t{:e}\t{}\n",
                self.suite,
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.value,
                c.threshold,
                c.detail
            ));
        }
        out
    }
}

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    let checks = match name {
        "boundedness" => vec![boundedness(100_000, 1)?, stage_boundedness(10_000, 7)?],
        "monotonicity" => monotonicity(1000, 2)?,
        "reductions" => reductions(3)?,
        "stability" => vec![stability()?],
        "regret_toy" => regret_toy()?,
        "hvp_cg" => {
            let mut c = derivative_checks(4)?;
            c.extend(cg_checks(5)?);
            c.push(hypergradient_oracle()?);
            c
        }
        "neff" => {
            let mut c = neff_identities()?;
            c.push(neff_variance(10_000, 6)?);
            c.push(fossil_neff_floor()?);
            c
        }
        other => {
            return Err(FossilError::InvalidInput(format!(
                "unknown suite {other}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport { suite: name.into(), checks })
}

/// A random valid configuration. The temperature floor stays at or above
/// 0.005 so `exp(-d / T)` cannot underflow to zero for `d <= 1`.
pub fn random_config(rng: &mut ChaCha8Rng) -> FossilConfig {
    let k = rng.gen_range(1..=5);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let t0 = rng.gen_range(0.1..5.0);
    FossilConfig {
        t_warm: rng.gen_range(0..20),
        t0,
        min_temp: rng.gen_range(0.005..=t0.min(1.0)),
        temp_decay: rng.gen_range(0.1..10.0),
        gamma_scale: rng.gen_range(0.0..5.0),
        gamma_max: rng.gen_range(0.0..3.0),
        class_clamp: if rng.gen_bool(0.5) { f64::INFINITY } else { rng.gen_range(0.5..50.0) },
        stage_mode: false,
        total_epochs: rng.gen_range(1..100),
        ..FossilConfig::default()
    }
    .with_priors(raw.iter().map(|r| r / total).collect())
}

/// `0 < w <= min(1/(K p(y)), clamp)` over random configurations and inputs.
/// Stage mode is covered separately by [`stage_boundedness`], since its
/// multipliers may exceed one.
pub fn boundedness(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut first = String::new();
    let mut done = 0;
    while done < trials {
        let cfg = random_config(&mut rng);
        cfg.validate()?;
        let n = 100.min(trials - done);
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..cfg.num_classes) as u8).collect();
        let aug: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let t = rng.gen_range(0..200);
        let w = crate::weighting::fossil_weights(t, &cfg, &d, &labels, &aug)?;
        let bound = class_term(&labels, &cfg)?;
        for i in 0..n {
            if !(w[i] > 0.0 && w[i] <= bound[i]) {
                violations += 1;
                if first.is_empty() {
                    first = format!("w={} bound={} d={} t={t}", w[i], bound[i], d[i]);
                }
            }
        }
        done += n;
    }
    let detail = if first.is_empty() { format!("{trials} evaluations") } else { format!("{trials} evaluations; first violation {first}") };
    Ok(Check::at_most("weights in (0, class term]", violations as f64, 0.0, detail))
}

/// In stage mode the bound scales by the largest stage multiplier.
pub fn stage_boundedness(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut done = 0;
    while done < trials {
        let mut cfg = random_config(&mut rng);
        cfg.stage_mode = true;
        let n = 100.min(trials - done);
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..cfg.num_classes) as u8).collect();
        let aug: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let w = crate::weighting::fossil_weights(rng.gen_range(0..200), &cfg, &d, &labels, &aug)?;
        let scale = cfg.stage_multipliers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bound = class_term(&labels, &cfg)?;
        violations += w.iter().zip(&bound).filter(|(wi, b)| !(**wi > 0.0 && **wi <= **b * scale)).count();
        done += n;
    }
    Ok(Check::at_most("stage mode: weights in (0, max multiplier x class term]", violations as f64, 0.0, format!("{trials} evaluations")))
}

/// Weights of one sample along an explicit temperature trajectory, with
/// gamma and warmup following the configuration.
fn trajectory_weights(cfg: &FossilConfig, temps: &[f64], gammas: &[f64], d: f64, label: u8, aug: bool) -> Result<Vec<f64>> {
    temps
        .iter()
        .zip(gammas)
        .enumerate()
        .map(|(t, (&temperature, &gamma))| {
            let s = ScheduleValues { temperature, gamma, warmup: warmup_at(t, cfg) };
            Ok(weights_with_schedule(s, cfg, &[d], &[label], &[aug])?[0])
        })
        .collect()
}

/// Checks the curriculum monotonicity claim as stated (nonincreasing `T_t`
/// makes each weight nondecreasing in `t`), the schedule monotonicity, and
/// the direction that does hold (nondecreasing `T_t` with fixed gamma).
pub fn monotonicity(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = 30;
    let (mut stated_bad, mut corrected_bad, mut schedule_bad) = (0usize, 0usize, 0usize);
    let mut example = String::new();
    for _ in 0..trials {
        let mut cfg = random_config(&mut rng);
        cfg.stage_mode = false;
        let d = rng.gen_range(0.0..=1.0);
        let label = rng.gen_range(0..cfg.num_classes) as u8;
        let aug = rng.gen_bool(0.5);

        let mut temps = vec![rng.gen_range(0.05..5.0)];
        for _ in 1..steps {
            let last: f64 = *temps.last().unwrap();
            temps.push((last * rng.gen_range(0.5..=1.0)).max(0.005));
        }
        let gammas: Vec<f64> = (0..steps).map(|t| gamma_at(t, &cfg)).collect();
        let w = trajectory_weights(&cfg, &temps, &gammas, d, label, aug)?;
        if let Some(t) = (1..steps).find(|&t| w[t] < w[t - 1] * (1.0 - 1e-12)) {
            stated_bad += 1;
            if example.is_empty() {
                example = format!(
                    "d={d:.3} aug={aug}: T {:.3}->{:.3}, w {:.4}->{:.4}",
                    temps[t - 1],
                    temps[t],
                    w[t - 1],
                    w[t]
                );
            }
        }

        let mut rising = vec![rng.gen_range(0.005..1.0)];
        for _ in 1..steps {
            let last: f64 = *rising.last().unwrap();
            rising.push(last * rng.gen_range(1.0..=1.5));
        }
        let fixed = vec![gamma_at(0, &cfg); steps];
        let w = trajectory_weights(&cfg, &rising, &fixed, d, label, aug)?;
        if w.windows(2).any(|p| p[1] < p[0] * (1.0 - 1e-12)) {
            corrected_bad += 1;
        }

        let tt: Vec<f64> = (0..steps * 4).map(|t| temperature_at(t, &cfg)).collect();
        let gg: Vec<f64> = (0..steps * 4).map(|t| gamma_at(t, &cfg)).collect();
        if tt.windows(2).any(|p| p[1] > p[0]) || gg.windows(2).any(|p| p[1] < p[0]) {
            schedule_bad += 1;
        }
    }
    Ok(vec![
        Check::at_most(
            "nonincreasing T_t gives nondecreasing w(t)",
            stated_bad as f64,
            0.0,
            format!("{stated_bad}/{trials} trajectories decrease; e.g. {example}"),
        ),
        Check::at_most(
            "nondecreasing T_t with fixed gamma gives nondecreasing w(t)",
            corrected_bad as f64,
            0.0,
            format!("{corrected_bad}/{trials} trajectories decrease"),
        ),
        Check::at_most(
            "T_t nonincreasing and gamma_t nondecreasing in t",
            schedule_bad as f64,
            0.0,
            format!("{trials} configurations"),
        ),
    ])
}

/// Class-balanced, curriculum and focal-ordering special cases.
pub fn reductions(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_dev = 0.0f64;
    let mut curriculum_dev = 0.0f64;
    for _ in 0..200 {
        let mut cfg = random_config(&mut rng);
        cfg.stage_mode = false;
        cfg.class_clamp = f64::INFINITY;
        let n = 50;
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..cfg.num_classes) as u8).collect();
        let aug: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let s = ScheduleValues { temperature: 1e12, gamma: 0.0, warmup: 1.0 };
        let w = weights_with_schedule(s, &cfg, &d, &labels, &aug)?;
        for (wi, &y) in w.iter().zip(&labels) {
            let target = 1.0 / (cfg.num_classes as f64 * cfg.class_priors[y as usize]);
            class_dev = class_dev.max((wi - target).abs() / target);
        }

        let uniform = FossilConfig { gamma_scale: 0.0, ..cfg.clone() }.with_priors(vec![0.5, 0.5]);
        let labels: Vec<u8> = labels.iter().map(|&y| y % 2).collect();
        let t = rng.gen_range(uniform.t_warm..uniform.t_warm + 100);
        let w = crate::weighting::fossil_weights(t, &uniform, &d, &labels, &aug)?;
        let exp_cfg = FossilConfig { t0: 1.0, temp_decay: 3.0, ..uniform.clone() };
        let w_exp = crate::weighting::fossil_weights(t, &exp_cfg, &d, &labels, &aug)?;
        let c = curriculum_weights(t, &d, CurriculumSchedule::Exp, exp_cfg.min_temp.min(1.0), exp_cfg.total_epochs);
        let temp = temperature_at(t, &uniform);
        for i in 0..n {
            curriculum_dev = curriculum_dev.max((w[i] - (-d[i] / temp).exp()).abs());
            curriculum_dev = curriculum_dev.max((w_exp[i] - c[i]).abs());
        }
    }

    // Single class: difficulty taken as the model's confidence in the label.
    let k1 = FossilConfig::default().with_priors(vec![1.0]);
    let p: Vec<f64> = (0..500).map(|_| rng.gen_range(0.01..0.99)).collect();
    let w = weights_with_schedule(ScheduleValues { temperature: 0.3, gamma: 0.0, warmup: 1.0 }, &k1, &p, &vec![0; p.len()], &vec![false; p.len()])?;
    let focal: Vec<f64> = p.iter().map(|pt| (1.0 - pt).powf(2.0)).collect();
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    let mismatches = order(&w).iter().zip(order(&focal)).filter(|(a, b)| **a != *b).count();

    Ok(vec![
        Check::at_most("class-balanced reduction (relative)", class_dev, 1e-9, "gamma=0, T=1e12, warm, no clamp".into()),
        Check::at_most("curriculum reduction (absolute)", curriculum_dev, 1e-9, "uniform priors, gamma=0, t >= t_warm".into()),
        Check::at_most("single-class ordering matches focal modulation", mismatches as f64, 0.0, "argsort positions that differ".into()),
    ])
}

/// Full short runs of the closed-form weights on the most imbalanced setting;
/// every epoch must keep a finite validation loss.
pub fn stability() -> Result<Check> {
    let cfg = ExperimentConfig {
        epochs: 10,
        seeds: vec![42, 77],
        imbalance_ratios: vec![19.0],
        methods: vec![
            MethodEntry::new(MethodName::Fossil),
            MethodEntry::new(MethodName::Fossil).untuned().with_label("fossil_default"),
        ],
        data: DataConfig { n_samples: 800, ..DataConfig::default() },
        threads: Some(1),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg)?;
    let finite = out
        .trajectories
        .iter()
        .flat_map(|t| t.trajectory.records())
        .all(|r| r.val_loss.is_finite() && r.weights.max.is_finite());
    let bad = out.failures() + usize::from(!finite);
    Ok(Check::at_most("finite loss and weights across runs", bad as f64, 0.0, format!("{} runs", out.results.len())))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub const REGRET_HORIZONS: [usize; 4] = [100, 400, 1600, 6400];

/// Static regret growth on i.i.d. streams, and dynamic regret against
/// `static + c P_T` with `c = D / eta_T` on drifting streams.
pub fn regret_toy() -> Result<Vec<Check>> {
    let toy = OgdToy::new(1.0, 3);
    let mut slopes = Vec::new();
    let mut worst_ratio = 0.0f64;
    for seed in [1, 2, 3] {
        let mut regrets = Vec::new();
        for &t in &REGRET_HORIZONS {
            let c = iid_stream(t, 3, 1.0, seed);
            regrets.push(ogd_toy_regret(&toy, &c, &c)?.static_regret);
        }
        if regrets.iter().any(|&r| r <= 0.0) {
            return Err(FossilError::InvalidInput("nonpositive static regret on an i.i.d. stream".into()));
        }
        let x: Vec<f64> = REGRET_HORIZONS.iter().map(|&t| t as f64).collect();
        slopes.push(loglog_slope(&x, &regrets));
        for k in 1..regrets.len() {
            let ratio = (regrets[k] / x[k].sqrt()) / (regrets[k - 1] / x[k - 1].sqrt());
            worst_ratio = worst_ratio.max(ratio);
        }
    }
    let slope = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let toy2 = OgdToy::new(1.0, 2);
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_bound_margin = f64::NEG_INFINITY;
    let mut detail = String::new();
    for &speed in &[0.002, 0.02, 0.2] {
        for &t in &REGRET_HORIZONS {
            let (centers, path) = drifting_stream(t, 1.0, speed, 11);
            let r = ogd_toy_regret(&toy2, &centers, &path)?;
            let c = toy2.diameter() / toy2.step_size(t);
            let margin = r.dynamic_regret - (r.static_regret + c * r.path_length);
            if margin > worst_margin {
                worst_margin = margin;
                detail = format!(
                    "speed {speed} T {t}: dynamic {:.2}, static {:.2}, P_T {:.2}, c {:.1}",
                    r.dynamic_regret, r.static_regret, r.path_length, c
                );
            }
            let bound_margin = r.dynamic_regret - (toy2.static_bound(t) + c * r.path_length);
            worst_bound_margin = worst_bound_margin.max(bound_margin);
        }
    }
    Ok(vec![
        Check::at_most("static regret growth exponent", slope, 0.75, format!("max log-log slope over 3 streams, T in {REGRET_HORIZONS:?}")),
        Check::at_most("static regret / sqrt(T) successive ratio", worst_ratio, 2.5, "worst over 3 streams".into()),
        Check::at_most("dynamic <= static + c P_T", worst_margin, 0.0, detail),
        Check::at_most("dynamic <= static bound + c P_T", worst_bound_margin, 0.0, "textbook static bound in place of realized regret".into()),
    ])
}

fn jittered_params(spec: &MlpSpec, seed: u64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    net::init_params(spec, seed).iter().map(|p| p + rng.gen_range(-0.1..0.1)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Batch> {
    let features = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let weights = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
    Batch::new(features, d, labels, weights, vec![false; n])
}

/// Gradient and Hessian-vector products of the default network against
/// central differences, plus Hessian symmetry.
pub fn derivative_checks(seed: u64) -> Result<Vec<Check>> {
    let spec = MlpSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad_err = 0.0f64;
    let mut hvp_err = 0.0f64;
    let mut sym_err = 0.0f64;
    for trial in 0..10 {
        let loss = if trial % 2 == 0 { LossKind::Bce } else { LossKind::Focal { gamma: 2.0, alpha: Some(0.25) } };
        let params = jittered_params(&spec, trial, &mut rng);
        let batch = random_batch(&mut rng, 16, spec.input_dim())?;
        let g = net::grad(&spec, &params, &batch, loss)?;
        let h = 1e-5;
        for _ in 0..20 {
            let k = rng.gen_range(0..params.len());
            let mut p = params.clone();
            p[k] += h;
            let up = net::weighted_loss(&spec, &p, &batch, loss)?;
            p[k] -= 2.0 * h;
            let down = net::weighted_loss(&spec, &p, &batch, loss)?;
            let fd = (up - down) / (2.0 * h);
            grad_err = grad_err.max((g[k] - fd).abs() / fd.abs().max(g[k].abs()).max(1e-4));
        }

        let v: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hv = net::hvp(&spec, &params, &batch, loss, &v)?;
        let eps = 1e-5;
        let shift = |s: f64| -> Result<Vec<f64>> {
            let p: Vec<f64> = params.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            Ok(net::grad(&spec, &p, &batch, loss)?.into_vec())
        };
        let (gp, gm) = (shift(eps)?, shift(-eps)?);
        let diff: f64 = hv.iter().zip(gp.iter().zip(&gm)).map(|(a, (p, m))| (a - (p - m) / (2.0 * eps)).powi(2)).sum::<f64>().sqrt();
        hvp_err = hvp_err.max(diff / hv.norm());
        let hu = net::hvp(&spec, &params, &batch, loss, &u)?;
        let (uhv, vhu) = (net::dot(&u, &hv), net::dot(&v, &hu));
        sym_err = sym_err.max((uhv - vhu).abs() / uhv.abs().max(1.0));
    }
    Ok(vec![
        Check::at_most("gradient vs central differences (relative)", grad_err, 1e-4, "10 trials x 20 coordinates, 20-64-64-1".into()),
        Check::at_most("Hessian-vector product vs differenced gradient (relative)", hvp_err, 1e-3, "10 random directions".into()),
        Check::at_most("Hessian symmetry |u.Hv - v.Hu|", sym_err, 1e-8, "relative to max(1, |u.Hv|)".into()),
    ])
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = (0..n).map(|k| a[k][i] * a[k][j]).sum::<f64>() / n as f64;
        }
        m[i][i] += 0.1;
    }
    m
}

/// Worst relative residual of conjugate gradient on random SPD systems.
pub fn cg_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut sizes = Vec::new();
    for n in [5, 10, 25, 50, 75, 100] {
        let m = random_spd(n, &mut rng);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = CgConfig { damping: 0.0, max_iter: 10 * n, tol: 1e-10 };
        let sol = cg_solve(|v| Ok(m.iter().map(|row| net::dot(row, v)).collect()), &b, &cfg)?;
        worst = worst.max(sol.relative_residual);
        sizes.push(format!("{n}:{}", sol.iterations));
    }
    Ok(vec![Check::at_most("CG relative residual on SPD systems", worst, 1e-8, format!("size:iterations {}", sizes.join(" ")))])
}

/// Brute-force bilevel oracle on the two-sample quadratic: re-solve the inner
/// problem by gradient descent on a grid of weights, finite-difference the
/// validation loss, and compare with the implicit hypergradient.
pub fn hypergradient_oracle() -> Result<Check> {
    let toy = QuadraticToy { centers: vec![vec![1.0], vec![3.0]], target: vec![1.5], aug: vec![false, false] };
    let mut worst = 0.0f64;
    for w1 in [0.2, 0.35, 0.5, 0.65, 0.8] {
        let mut state = UpperState::new(2, 0);
        state.w = vec![w1, 1.0 - w1];
        let theta = toy.argmin(&state.coefficients(&toy.aug)?);
        let hg = hypergradient(&toy, &theta, &state, &CgConfig { damping: 0.0, max_iter: 10, tol: 1e-12 })?;
        let solve = |w: &[f64]| -> Result<f64> {
            let mut th = vec![0.0];
            for _ in 0..10_000 {
                let g = toy.train_grad(&th, w)?;
                th[0] -= g[0] / w.iter().sum::<f64>();
                if g[0].abs() < 1e-15 {
                    break;
                }
            }
            toy.val_loss(&th)
        };
        let h = 1e-5;
        for i in 0..2 {
            let mut up = state.w.clone();
            up[i] += h;
            let mut dn = state.w.clone();
            dn[i] -= h;
            let fd = (solve(&up)? - solve(&dn)?) / (2.0 * h);
            worst = worst.max((hg.grad_w[i] - fd).abs() / fd.abs().max(1e-8));
        }
    }
    Ok(Check::at_most("hypergradient vs brute-force oracle (relative)", worst, 1e-3, "2-sample quadratic, 5 weight settings".into()))
}

pub fn neff_identities() -> Result<Vec<Check>> {
    let n = 100;
    let uniform = effective_sample_size(&vec![1.0 / n as f64; n])?;
    let mut one_hot = vec![0.0; n];
    one_hot[17] = 3.0;
    let single = effective_sample_size(&one_hot)?;
    Ok(vec![
        Check::at_most("N_eff(uniform) = n", (uniform - n as f64).abs(), 1e-9, format!("{uniform}")),
        Check::at_most("N_eff(one-hot) = 1", (single - 1.0).abs(), 0.0, format!("{single}")),
    ])
}

/// Variance of a weighted mean of i.i.d. uniform draws against
/// `sigma^2 / N_eff` for several weight profiles.
pub fn neff_variance(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200;
    let profiles: Vec<Vec<f64>> = vec![
        vec![1.0; n],
        (0..n).map(|i| (-(i as f64) / 20.0).exp()).collect(),
        (0..n).map(|i| if i % 10 == 0 { 5.0 } else { 0.2 }).collect(),
        (0..n).map(|i| (-(i as f64 / n as f64) / 0.05).exp() + 0.01).collect(),
    ];
    let sigma2 = 1.0 / 12.0;
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for w in &profiles {
        let total: f64 = w.iter().sum();
        let neff = effective_sample_size(w)?;
        let means: Vec<f64> = (0..trials)
            .map(|_| w.iter().map(|wi| wi * rng.gen::<f64>()).sum::<f64>() / total)
            .collect();
        let m = means.iter().sum::<f64>() / trials as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let ratio = var * neff / sigma2;
        worst = worst.max((ratio - 1.0).abs());
        detail.push(format!("N_eff {neff:.1}: ratio {ratio:.3}"));
    }
    Ok(Check::at_most("Var(weighted mean) * N_eff / sigma^2 within 20% of 1", worst, 0.2, detail.join("; ")))
}

/// Smallest `N_eff / n` over every epoch of short closed-form runs.
pub fn fossil_neff_floor() -> Result<Check> {
    let cfg = ExperimentConfig {
        epochs: 10,
        seeds: vec![42, 77],
        imbalance_ratios: vec![9.0],
        methods: vec![MethodEntry::new(MethodName::Fossil)],
        data: DataConfig { n_samples: 800, ..DataConfig::default() },
        threads: Some(1),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg)?;
    Ok(min_neff_fraction(&out, &cfg, "fossil"))
}

/// Smallest per-epoch `N_eff / n_train` over the runs of `method`.
pub fn min_neff_fraction(out: &super::experiment::ExperimentOutput, cfg: &ExperimentConfig, method: &str) -> Check {
    let n_train = cfg.data.n_samples as f64 * if cfg.folds == 0 { 1.0 - cfg.data.test_fraction } else { 1.0 - 1.0 / cfg.folds as f64 };
    let min = out
        .trajectories
        .iter()
        .filter(|t| t.method == method)
        .flat_map(|t| t.trajectory.records())
        .map(|r| r.weights.n_eff / n_train)
        .fold(f64::INFINITY, f64::min);
    let runs = out.trajectories.iter().filter(|t| t.method == method).count();
    Check::at_least("N_eff >= 0.1 n at every epoch", min, 0.1, format!("{runs} runs of {method}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope").is_err());
    }

    #[test]
    fn cheap_suites_pass() {
        for name in ["boundedness", "reductions", "hvp_cg"] {
            let r = run_suite(name).unwrap();
            assert!(r.passed(), "{}", r.to_table());
        }
    }

    #[test]
    fn stated_monotonicity_fails_but_corrected_form_holds() {
        let checks = monotonicity(200, 2).unwrap();
        assert!(!checks[0].passed);
        assert!(checks[1].passed && checks[2].passed);
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.5)).collect();
        assert!((loglog_slope(&x, &y) - 0.5).abs() < 1e-12);
    }
}
