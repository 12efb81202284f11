//! Implicit-differentiation bilevel weighting: conjugate-gradient
//! hypergradients for per-sample weights `w` and augmentation penalties
//! `lambda`, projected momentum updates, and a projected online gradient
//! descent toy used to check regret growth.
//!
//! The lower-level loss is `L_train(theta) = sum_i w_i (1 - lambda_i [i aug]) l_i(theta)`,
//! so the mixed second derivatives are closed-form and only one linear solve
//! against the training Hessian is needed per hypergradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::mean_loss_grad;
use crate::error::{ensure_len, FossilError, Result};
use crate::metrics::{confusion_metrics, predict};
use crate::net::{self, dot, AdamState, Batch, LossKind, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||(H + damping I) x - rhs|| / ||rhs||`, recomputed from `x` at exit.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solves `(H + damping I) x = rhs` given only products with `H`.
///
/// Stops when the relative residual reaches `tol` or after `max_iter`
/// iterations; the latter is reported through `converged`, not as an error.
pub fn cg_solve<F>(mut apply_h: F, rhs: &[f64], cfg: &CgConfig) -> Result<CgSolution>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(cfg.damping >= 0.0) || !(cfg.tol > 0.0) {
        return Err(FossilError::InvalidConfig("cg needs damping >= 0 and tol > 0".into()));
    }
    if rhs.iter().any(|r| !r.is_finite()) {
        return Err(FossilError::NonFinite("cg right-hand side"));
    }
    let n = rhs.len();
    let mut apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut out = apply_h(v)?;
        ensure_len("cg operator output", n, out.len())?;
        for (o, vi) in out.iter_mut().zip(v) {
            *o += cfg.damping * vi;
        }
        Ok(out)
    };
    let b_norm = dot(rhs, rhs).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgSolution { x, iterations: 0, relative_residual: 0.0, converged: true });
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while iterations < cfg.max_iter && rr.sqrt() > cfg.tol * b_norm {
        let ap = apply(&p)?;
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() {
            return Err(FossilError::CgFailure { iterations, reason: "non-finite operator product".into() });
        }
        if curvature <= 0.0 {
            return Err(FossilError::CgFailure {
                iterations,
                reason: format!("non-positive curvature {curvature:e}"),
            });
        }
        let alpha = rr / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
        iterations += 1;
    }
    let ax = apply(&x)?;
    let res: f64 = ax.iter().zip(rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let relative_residual = res / b_norm;
    if !relative_residual.is_finite() {
        return Err(FossilError::CgFailure { iterations, reason: "non-finite residual".into() });
    }
    Ok(CgSolution {
        x,
        iterations,
        relative_residual,
        converged: relative_residual <= cfg.tol,
    })
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let mut u = z.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            tau = t;
        }
    }
    z.iter().map(|&zi| (zi - tau).max(0.0)).collect()
}

pub fn project_box(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&x| x.clamp(0.0, 1.0)).collect()
}

/// Upper-level variables with their momentum buffers. `lambda[j]` belongs to
/// the `j`-th augmented training sample in index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpperState {
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    pub m_w: Vec<f64>,
    pub m_lambda: Vec<f64>,
    pub beta_w: f64,
    pub beta_lambda: f64,
    pub eta_w: f64,
    pub eta_lambda: f64,
}

impl UpperState {
    /// Uniform weights, zero penalties, momentum 0.9, step 0.05.
    pub fn new(n_train: usize, n_aug: usize) -> Self {
        Self {
            w: vec![1.0 / n_train as f64; n_train],
            lambda: vec![0.0; n_aug],
            m_w: vec![0.0; n_train],
            m_lambda: vec![0.0; n_aug],
            beta_w: 0.9,
            beta_lambda: 0.9,
            eta_w: 0.05,
            eta_lambda: 0.05,
        }
    }

    pub fn check(&self) -> Result<()> {
        ensure_len("momentum w", self.w.len(), self.m_w.len())?;
        ensure_len("momentum lambda", self.lambda.len(), self.m_lambda.len())?;
        let sum: f64 = self.w.iter().sum();
        if self.w.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(FossilError::InvalidInput("w left the simplex".into()));
        }
        if self.lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(FossilError::InvalidInput("lambda left [0, 1]".into()));
        }
        if self.m_w.iter().chain(&self.m_lambda).any(|m| !m.is_finite()) {
            return Err(FossilError::NonFinite("momentum buffers"));
        }
        Ok(())
    }

    /// Per-sample loss coefficients `w_i (1 - lambda_i [i aug])`.
    pub fn coefficients(&self, aug_flags: &[bool]) -> Result<Vec<f64>> {
        ensure_len("aug flags", self.w.len(), aug_flags.len())?;
        let n_aug = aug_flags.iter().filter(|&&a| a).count();
        ensure_len("lambda", n_aug, self.lambda.len())?;
        let mut j = 0;
        Ok(self
            .w
            .iter()
            .zip(aug_flags)
            .map(|(&w, &a)| {
                if a {
                    j += 1;
                    w * (1.0 - self.lambda[j - 1])
                } else {
                    w
                }
            })
            .collect())
    }
}

/// `m <- beta m + (1 - beta) g`, then a projected step on `w` and `lambda`.
pub fn upper_update(state: &UpperState, grad_w: &[f64], grad_lambda: &[f64]) -> Result<UpperState> {
    ensure_len("grad w", state.w.len(), grad_w.len())?;
    ensure_len("grad lambda", state.lambda.len(), grad_lambda.len())?;
    let momentum = |m: &[f64], g: &[f64], beta: f64| -> Vec<f64> {
        m.iter().zip(g).map(|(m, g)| beta * m + (1.0 - beta) * g).collect()
    };
    let m_w = momentum(&state.m_w, grad_w, state.beta_w);
    let m_lambda = momentum(&state.m_lambda, grad_lambda, state.beta_lambda);
    let step = |x: &[f64], m: &[f64], eta: f64| -> Vec<f64> { x.iter().zip(m).map(|(x, m)| x - eta * m).collect() };
    Ok(UpperState {
        w: project_simplex(&step(&state.w, &m_w, state.eta_w)),
        lambda: project_box(&step(&state.lambda, &m_lambda, state.eta_lambda)),
        m_w,
        m_lambda,
        ..state.clone()
    })
}

/// Lower/upper problem pair seen through the quantities the hypergradient
/// needs. `coeffs` are the per-sample loss coefficients.
pub trait BilevelProblem {
    fn dim(&self) -> usize;
    fn aug_flags(&self) -> &[bool];
    fn train_grad(&self, theta: &[f64], coeffs: &[f64]) -> Result<Vec<f64>>;
    fn train_hvp(&self, theta: &[f64], coeffs: &[f64], v: &[f64]) -> Result<Vec<f64>>;
    fn val_loss(&self, theta: &[f64]) -> Result<f64>;
    fn val_grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// `grad l_i(theta) . v` for every training sample.
    fn sample_grad_dots(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>;
    fn val_balanced_error(&self, _theta: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }

    fn n_train(&self) -> usize {
        self.aug_flags().len()
    }
}

#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub grad_w: Vec<f64>,
    pub grad_lambda: Vec<f64>,
    pub cg: CgSolution,
}

/// `grad_w_i F = -(1 - lambda_i [aug]) g_i . v` and `grad_lambda_j F = w_j g_j . v`
/// with `v = (H_train + damping I)^{-1} grad L_val`.
pub fn hypergradient<P: BilevelProblem>(problem: &P, theta: &[f64], state: &UpperState, cg: &CgConfig) -> Result<Hypergradient> {
    let aug = problem.aug_flags();
    let coeffs = state.coefficients(aug)?;
    let rhs = problem.val_grad(theta)?;
    let sol = cg_solve(|v| problem.train_hvp(theta, &coeffs, v), &rhs, cg)?;
    let dots = problem.sample_grad_dots(theta, &sol.x)?;
    let mut grad_w = Vec::with_capacity(dots.len());
    let mut grad_lambda = Vec::with_capacity(state.lambda.len());
    let mut j = 0;
    for (i, &g) in dots.iter().enumerate() {
        if aug[i] {
            grad_w.push(-(1.0 - state.lambda[j]) * g);
            grad_lambda.push(state.w[i] * g);
            j += 1;
        } else {
            grad_w.push(-g);
        }
    }
    Ok(Hypergradient { grad_w, grad_lambda, cg: sol })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { steps: 50, lr: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Range {
    fn of(x: &[f64]) -> Option<Self> {
        if x.is_empty() {
            return None;
        }
        Some(Self {
            min: x.iter().copied().fold(f64::INFINITY, f64::min),
            max: x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: x.iter().sum::<f64>() / x.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilevelEpoch {
    pub epoch: usize,
    pub val_loss: f64,
    pub val_balanced_error: Option<f64>,
    pub w: Range,
    pub lambda: Option<Range>,
    pub cg_iterations: usize,
    pub cg_residual: Option<f64>,
    /// Set when the linear solve failed and the upper update was skipped.
    pub failure: Option<String>,
}

/// Alternates `inner.steps` Adam steps on the weighted training loss with one
/// hypergradient and one projected upper update per epoch. A failed linear
/// solve is recorded and the upper update for that epoch is skipped.
pub fn run_bilevel<P: BilevelProblem>(
    problem: &P,
    theta: &mut [f64],
    epochs: usize,
    inner: &InnerConfig,
    state: &mut UpperState,
    cg: &CgConfig,
) -> Result<Vec<BilevelEpoch>> {
    ensure_len("theta", problem.dim(), theta.len())?;
    state.check()?;
    let mut adam = AdamState::new(theta.len(), inner.lr);
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let coeffs = state.coefficients(problem.aug_flags())?;
        for _ in 0..inner.steps {
            let g = problem.train_grad(theta, &coeffs)?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(FossilError::NonFinite("inner gradient"));
            }
            adam.update(theta, &g);
        }
        let (cg_iterations, cg_residual, failure) = match hypergradient(problem, theta, state, cg) {
            Ok(h) => {
                *state = upper_update(state, &h.grad_w, &h.grad_lambda)?;
                (h.cg.iterations, Some(h.cg.relative_residual), None)
            }
            Err(FossilError::CgFailure { iterations, reason }) => (iterations, None, Some(reason)),
            Err(e) => return Err(e),
        };
        state.check()?;
        records.push(BilevelEpoch {
            epoch,
            val_loss: problem.val_loss(theta)?,
            val_balanced_error: problem.val_balanced_error(theta)?,
            w: Range::of(&state.w).unwrap_or_default(),
            lambda: Range::of(&state.lambda),
            cg_iterations,
            cg_residual,
            failure,
        });
    }
    Ok(records)
}

/// `l_i = 0.5 ||theta - a_i||^2`, `L_val = 0.5 ||theta - b||^2`.
#[derive(Clone, Debug)]
pub struct QuadraticToy {
    pub centers: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub aug: Vec<bool>,
}

impl QuadraticToy {
    /// Closed-form lower-level minimizer `sum c_i a_i / sum c_i`.
    pub fn argmin(&self, coeffs: &[f64]) -> Vec<f64> {
        let total: f64 = coeffs.iter().sum();
        let mut out = vec![0.0; self.target.len()];
        for (c, a) in coeffs.iter().zip(&self.centers) {
            for (o, ai) in out.iter_mut().zip(a) {
                *o += c * ai / total;
            }
        }
        out
    }
}

impl BilevelProblem for QuadraticToy {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn aug_flags(&self) -> &[bool] {
        &self.aug
    }

    fn train_grad(&self, theta: &[f64], coeffs: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; theta.len()];
        for (c, a) in coeffs.iter().zip(&self.centers) {
            for k in 0..theta.len() {
                g[k] += c * (theta[k] - a[k]);
            }
        }
        Ok(g)
    }

    fn train_hvp(&self, _theta: &[f64], coeffs: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let total: f64 = coeffs.iter().sum();
        Ok(v.iter().map(|x| total * x).collect())
    }

    fn val_loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(0.5 * theta.iter().zip(&self.target).map(|(t, b)| (t - b).powi(2)).sum::<f64>())
    }

    fn val_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(theta.iter().zip(&self.target).map(|(t, b)| t - b).collect())
    }

    fn sample_grad_dots(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .centers
            .iter()
            .map(|a| theta.iter().zip(a).zip(v).map(|((t, a), v)| (t - a) * v).sum())
            .collect())
    }
}

/// The MLP with a training batch (carrying aug flags) and a validation batch
/// scored by mean BCE.
#[derive(Clone, Debug)]
pub struct MlpProblem {
    pub spec: MlpSpec,
    pub train: Batch,
    pub val: Batch,
    pub loss: LossKind,
}

impl MlpProblem {
    fn weighted(&self, coeffs: &[f64]) -> Result<Batch> {
        self.train.clone().with_weights(coeffs.to_vec())
    }
}

impl BilevelProblem for MlpProblem {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn aug_flags(&self) -> &[bool] {
        self.train.aug_flags()
    }

    fn train_grad(&self, theta: &[f64], coeffs: &[f64]) -> Result<Vec<f64>> {
        Ok(net::grad(&self.spec, theta, &self.weighted(coeffs)?, self.loss)?.into_vec())
    }

    fn train_hvp(&self, theta: &[f64], coeffs: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(net::hvp(&self.spec, theta, &self.weighted(coeffs)?, self.loss, v)?.into_vec())
    }

    fn val_loss(&self, theta: &[f64]) -> Result<f64> {
        let n = self.val.len() as f64;
        let losses = net::per_sample_losses(&self.spec, theta, &self.val, LossKind::Bce)?;
        Ok(losses.iter().sum::<f64>() / n)
    }

    fn val_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        mean_loss_grad(&self.spec, theta, &self.val)
    }

    fn sample_grad_dots(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        net::directional_derivatives(&self.spec, theta, &self.train, self.loss, v)
    }

    fn val_balanced_error(&self, theta: &[f64]) -> Result<Option<f64>> {
        let probs = net::forward(&self.spec, theta, self.val.features())?;
        let cm = confusion_metrics(&predict(&probs), self.val.labels())?;
        Ok(Some(1.0 - cm.balanced_accuracy))
    }
}

/// Projected online gradient descent on `f_t(x) = ||x - c_t||^2` over the
/// ball of radius `radius` centred at the origin.
#[derive(Clone, Debug)]
pub struct OgdToy {
    pub radius: f64,
    pub lipschitz: f64,
    pub start: Vec<f64>,
}

impl OgdToy {
    /// Gradient bound `2 D` for centres inside the ball of diameter `D`.
    pub fn new(radius: f64, dim: usize) -> Self {
        Self {
            radius,
            lipschitz: 4.0 * radius,
            start: vec![0.0; dim],
        }
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    /// `eta_t = D / (G sqrt(t))`, one-based `t`.
    pub fn step_size(&self, t: usize) -> f64 {
        self.diameter() / (self.lipschitz * (t as f64).sqrt())
    }

    /// The textbook static-regret bound `D^2 / (2 eta_T) + (G^2 / 2) sum eta_t`.
    pub fn static_bound(&self, rounds: usize) -> f64 {
        let sum_eta: f64 = (1..=rounds).map(|t| self.step_size(t)).sum();
        self.diameter().powi(2) / (2.0 * self.step_size(rounds)) + self.lipschitz.powi(2) / 2.0 * sum_eta
    }

    fn project(&self, x: &mut [f64]) {
        let norm = dot(x, x).sqrt();
        if norm > self.radius {
            for v in x.iter_mut() {
                *v *= self.radius / norm;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgdRegret {
    pub static_regret: f64,
    pub dynamic_regret: f64,
    pub path_length: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn ogd_toy_regret(toy: &OgdToy, centers: &[Vec<f64>], comparator: &[Vec<f64>]) -> Result<OgdRegret> {
    ensure_len("comparator path", centers.len(), comparator.len())?;
    let dim = toy.start.len();
    let mut x = toy.start.clone();
    let mut learner = 0.0;
    let mut dynamic = 0.0;
    let mut mean = vec![0.0; dim];
    for (t, (c, u)) in centers.iter().zip(comparator).enumerate() {
        ensure_len("centre", dim, c.len())?;
        ensure_len("comparator", dim, u.len())?;
        let f = sq_dist(&x, c);
        learner += f;
        dynamic += f - sq_dist(u, c);
        for k in 0..dim {
            mean[k] += c[k] / centers.len() as f64;
        }
        let eta = toy.step_size(t + 1);
        for k in 0..dim {
            x[k] -= eta * 2.0 * (x[k] - c[k]);
        }
        toy.project(&mut x);
    }
    // The isotropic quadratic's constrained minimiser is the projected mean.
    toy.project(&mut mean);
    let best: f64 = centers.iter().map(|c| sq_dist(&mean, c)).sum();
    let path_length = comparator.windows(2).map(|w| sq_dist(&w[1], &w[0]).sqrt()).sum();
    Ok(OgdRegret {
        static_regret: learner - best,
        dynamic_regret: dynamic,
        path_length,
    })
}

/// Centres drawn uniformly from the ball of radius `radius`.
pub fn iid_stream(rounds: usize, dim: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rounds).map(|_| uniform_in_ball(&mut rng, dim, radius)).collect()
}

fn uniform_in_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dot(&v, &v).sqrt().max(1e-300);
    let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
    for x in &mut v {
        *x *= r / norm;
    }
    v
}

/// Centres on a circle of radius `radius / 2` rotating by `speed` radians per
/// round, plus uniform noise of size `radius / 4` (the drifting mean is the
/// comparator path).
pub fn drifting_stream(rounds: usize, radius: f64, speed: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(rounds);
    let mut path = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let angle = speed * t as f64;
        let m = vec![0.5 * radius * angle.cos(), 0.5 * radius * angle.sin()];
        let noise = uniform_in_ball(&mut rng, 2, 0.25 * radius);
        centers.push(vec![m[0] + noise[0], m[1] + noise[1]]);
        path.push(m);
    }
    (centers, path)
}
