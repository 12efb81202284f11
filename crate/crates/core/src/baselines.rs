//! Comparison weighting schemes: uniform (ERM), inverse class frequency
//! (static), focal loss, a learned loss-to-weight net trained by a one-step
//! meta objective, and a difficulty curriculum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, FossilError, Result};
use crate::net::{self, sigmoid, Batch, LossKind, MlpSpec};
use crate::weighting::{class_term, temperature_at, FossilConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Erm,
    Static,
    Focal,
    Metaweight,
    Curriculum,
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Erm => "erm",
            BaselineMethod::Static => "static",
            BaselineMethod::Focal => "focal",
            BaselineMethod::Metaweight => "metaweight",
            BaselineMethod::Curriculum => "curriculum",
        }
    }

    /// ERM and static reweighting have nothing to tune.
    pub fn tunable(&self) -> bool {
        !matches!(self, BaselineMethod::Erm | BaselineMethod::Static)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumSchedule {
    Linear,
    Exp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub focal_gamma: f64,
    pub focal_alpha: Option<f64>,
    pub metaweight_hidden: usize,
    pub meta_lr: f64,
    pub curriculum_schedule: CurriculumSchedule,
    pub curriculum_min_temp: f64,
    pub tuned: bool,
}

impl BaselineConfig {
    pub fn default_for(method: BaselineMethod) -> Self {
        Self {
            method,
            focal_gamma: 2.0,
            focal_alpha: None,
            metaweight_hidden: 100,
            meta_lr: 1e-4,
            curriculum_schedule: CurriculumSchedule::Linear,
            curriculum_min_temp: 0.05,
            tuned: false,
        }
    }

    /// Tuned values where the method has any; untunable methods are returned
    /// unchanged with `tuned = false`.
    pub fn tuned_for(method: BaselineMethod) -> Self {
        let base = Self::default_for(method);
        if !method.tunable() {
            return base;
        }
        Self {
            focal_gamma: 3.0,
            focal_alpha: Some(0.25),
            metaweight_hidden: 64,
            meta_lr: 5e-4,
            curriculum_schedule: CurriculumSchedule::Linear,
            curriculum_min_temp: 0.10,
            tuned: true,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(FossilError::InvalidConfig("focal gamma must be nonnegative".into()));
        }
        if let Some(a) = self.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(FossilError::InvalidConfig("focal alpha must lie in [0, 1]".into()));
            }
        }
        if self.metaweight_hidden == 0 {
            return Err(FossilError::InvalidConfig("weight-net width must be positive".into()));
        }
        if !(self.meta_lr > 0.0) {
            return Err(FossilError::InvalidConfig("meta_lr must be positive".into()));
        }
        if !(self.curriculum_min_temp > 0.0) {
            return Err(FossilError::InvalidConfig("curriculum min_temp must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.method {
            BaselineMethod::Focal => LossKind::Focal {
                gamma: self.focal_gamma,
                alpha: self.focal_alpha,
            },
            _ => LossKind::Bce,
        }
    }
}

pub fn erm_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Inverse-frequency weights `1 / (K p(y))`, the class term without a cap.
pub fn static_weights(labels: &[u8], priors: &[f64]) -> Result<Vec<f64>> {
    let cfg = FossilConfig {
        class_clamp: f64::INFINITY,
        ..FossilConfig::default().with_priors(priors.to_vec())
    };
    class_term(labels, &cfg)
}

/// `-alpha_y (1 - p_t)^gamma ln p_t` from positive-class probabilities.
pub fn focal_loss(probabilities: &[f64], labels: &[u8], gamma: f64, alpha: Option<f64>) -> Result<Vec<f64>> {
    ensure_len("focal labels", probabilities.len(), labels.len())?;
    const EPS: f64 = 1e-15;
    probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if !(0.0..=1.0).contains(&p) {
                return Err(FossilError::InvalidInput(format!("probability {p} outside [0, 1]")));
            }
            let p = p.clamp(EPS, 1.0 - EPS);
            let (pt, a) = if y == 1 {
                (p, alpha.unwrap_or(1.0))
            } else {
                (1.0 - p, alpha.map_or(1.0, |a| 1.0 - a))
            };
            Ok(-a * (1.0 - pt).powf(gamma) * pt.ln())
        })
        .collect()
}

/// Curriculum temperature: linear from `t0` to `min_temp` over the run, or
/// the exponential schedule of the closed-form weights.
pub fn curriculum_temperature(
    t: usize,
    schedule: CurriculumSchedule,
    t0: f64,
    min_temp: f64,
    total_epochs: usize,
) -> f64 {
    match schedule {
        CurriculumSchedule::Linear => {
            let frac = (t as f64 / total_epochs as f64).min(1.0);
            t0 + (min_temp - t0) * frac
        }
        CurriculumSchedule::Exp => {
            let cfg = FossilConfig {
                t0,
                min_temp,
                total_epochs,
                ..FossilConfig::default()
            };
            temperature_at(t, &cfg)
        }
    }
}

/// `exp(-d_i / T_t)` with `T0 = 1`.
pub fn curriculum_weights(
    t: usize,
    d: &[f64],
    schedule: CurriculumSchedule,
    min_temp: f64,
    total_epochs: usize,
) -> Vec<f64> {
    let temp = curriculum_temperature(t, schedule, 1.0, min_temp, total_epochs);
    d.iter().map(|&x| (-x / temp).exp()).collect()
}

/// One-hidden-layer net mapping a standardized loss to a weight in (0, 1).
///
/// Parameter layout: input weights, hidden biases, output weights, output
/// bias (`3h + 1` values).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNet {
    hidden: usize,
    phi: Vec<f64>,
}

impl WeightNet {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi = vec![0.0; 3 * hidden + 1];
        let first = Normal::new(0.0, 2f64.sqrt()).unwrap();
        let second = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        for w in &mut phi[..hidden] {
            *w = first.sample(&mut rng);
        }
        for w in &mut phi[2 * hidden..3 * hidden] {
            *w = second.sample(&mut rng);
        }
        Self { hidden, phi }
    }

    pub fn num_params(&self) -> usize {
        self.phi.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.phi
    }

    pub fn eval(&self, z: f64) -> f64 {
        eval_weight_net(&self.phi, self.hidden, z)
    }
}

fn eval_weight_net(phi: &[f64], h: usize, z: f64) -> f64 {
    let mut out = phi[3 * h];
    for j in 0..h {
        let a = (phi[j] * z + phi[h + j]).max(0.0);
        out += phi[2 * h + j] * a;
    }
    sigmoid(out)
}

/// Mutable weight-net state owned by one training run.
#[derive(Clone, Debug)]
pub struct MetaWeightState {
    pub net: WeightNet,
    pub meta_lr: f64,
    /// Step size of the virtual parameter update.
    pub inner_lr: f64,
    /// Central-difference step over the net parameters.
    pub fd_step: f64,
}

impl MetaWeightState {
    pub fn new(hidden: usize, meta_lr: f64, inner_lr: f64, seed: u64) -> Self {
        Self {
            net: WeightNet::new(hidden, seed),
            meta_lr,
            inner_lr,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaStepOutput {
    /// Net outputs after the update, each in (0, 1).
    pub raw: Vec<f64>,
    /// `raw` rescaled to mean one.
    pub weights: Vec<f64>,
    pub meta_grad: Vec<f64>,
}

/// Standardizes losses to zero mean and unit variance; constant input maps
/// to all zeros.
pub fn standardize(losses: &[f64]) -> Vec<f64> {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; losses.len()];
    }
    losses.iter().map(|l| (l - mean) / sd).collect()
}

/// One truncated meta-step on the weight net.
///
/// The virtual update is `theta' = theta - inner_lr * sum_i u_i grad l_i`
/// where `u_i = g(z_i) / sum_j g(z_j)`, matching the mean-one rescaling used
/// for the real update. Only relative weights matter, so the net cannot lower
/// the validation loss by inflating every weight at once. The derivative of
/// the mean validation loss at `theta'` with respect to `u_i` is
/// `-inner_lr * grad l_i(theta) . grad L_val(theta')`; it is chained through
/// the normalization exactly and through the net by central differences.
pub fn metaweight_step(
    state: &mut MetaWeightState,
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    val_batch: &Batch,
) -> Result<MetaStepOutput> {
    if batch.is_empty() || val_batch.is_empty() {
        return Err(FossilError::InvalidInput("meta-step needs nonempty batches".into()));
    }
    let h = state.net.hidden;
    let unit = Batch::unweighted(batch.features().to_vec(), batch.n_features(), batch.labels().to_vec())?;
    let losses = net::per_sample_losses(spec, params, &unit, LossKind::Bce)?;
    let z = standardize(&losses);
    let g: Vec<f64> = z.iter().map(|&zi| state.net.eval(zi)).collect();

    let total: f64 = g.iter().sum();
    let normalized: Vec<f64> = g.iter().map(|gi| gi / total).collect();
    let weighted = unit.clone().with_weights(normalized.clone())?;
    let step = net::grad(spec, params, &weighted, LossKind::Bce)?;
    let virtual_params: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p - state.inner_lr * s).collect();

    let val_grad = mean_loss_grad(spec, &virtual_params, val_batch)?;
    let dots = net::directional_derivatives(spec, params, &unit, LossKind::Bce, &val_grad)?;
    // Derivative with respect to the normalized weights, then through the
    // normalization back to the raw outputs.
    let a: Vec<f64> = dots.iter().map(|c| -state.inner_lr * c).collect();
    let centre: f64 = a.iter().zip(&normalized).map(|(ai, wi)| ai * wi).sum();
    let dg: Vec<f64> = a.iter().map(|ai| (ai - centre) / total).collect();

    let eps = state.fd_step;
    let mut meta_grad = vec![0.0; state.net.phi.len()];
    let mut phi = state.net.phi.clone();
    for (k, mg) in meta_grad.iter_mut().enumerate() {
        let orig = phi[k];
        phi[k] = orig + eps;
        let plus: Vec<f64> = z.iter().map(|&zi| eval_weight_net(&phi, h, zi)).collect();
        phi[k] = orig - eps;
        let minus: Vec<f64> = z.iter().map(|&zi| eval_weight_net(&phi, h, zi)).collect();
        phi[k] = orig;
        *mg = plus
            .iter()
            .zip(&minus)
            .zip(&dg)
            .map(|((p, m), d)| d * (p - m) / (2.0 * eps))
            .sum();
    }
    if meta_grad.iter().any(|x| !x.is_finite()) {
        return Err(FossilError::NonFinite("meta-gradient"));
    }
    for (p, gk) in state.net.phi.iter_mut().zip(&meta_grad) {
        *p -= state.meta_lr * gk;
    }

    let raw: Vec<f64> = z.iter().map(|&zi| state.net.eval(zi)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let weights = raw.iter().map(|w| w / mean).collect();
    Ok(MetaStepOutput { raw, weights, meta_grad })
}

/// Gradient of the mean BCE over `batch`, ignoring its stored weights.
pub(crate) fn mean_loss_grad(spec: &MlpSpec, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
    let n = batch.len();
    let b = Batch::new(
        batch.features().to_vec(),
        batch.n_features(),
        batch.labels().to_vec(),
        vec![1.0 / n as f64; n],
        vec![false; n],
    )?;
    Ok(net::grad(spec, params, &b, LossKind::Bce)?.into_vec())
}
