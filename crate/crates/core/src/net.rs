//! Fixed-topology feedforward binary classifier.
//!
//! The network is a stack of dense layers with rectified-linear hidden
//! activations and a single logistic output unit. Gradients are computed by
//! hand-written reverse mode; Hessian-vector products by forward-mode
//! differentiation of that reverse pass (the R-operator), so `H v` costs a
//! small constant multiple of one gradient and the Hessian is never formed.
//!
//! Parameters are stored flat, layer by layer, each layer as its weight
//! matrix (row-major, `fan_out x fan_in`) followed by its bias vector.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, FossilError, Result};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before the logistic.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(FossilError::InvalidConfig(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(FossilError::InvalidConfig("layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(FossilError::InvalidConfig(
                "binary classifier must have a single output unit".into(),
            ));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    w_off: offset,
                    b_off: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            layer_sizes: vec![20, 64, 64, 1],
        }
    }
}

impl TryFrom<Vec<usize>> for MlpSpec {
    type Error = FossilError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MlpSpec> for Vec<usize> {
    fn from(s: MlpSpec) -> Self {
        s.layer_sizes
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

/// Flat parameter vector of an [`MlpSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn check_for(&self, spec: &MlpSpec) -> Result<()> {
        ensure_len("parameter vector", spec.num_params(), self.0.len())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// He-style initialization: weights `N(0, 2/fan_in)`, biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.num_params()];
    for layer in spec.layers() {
        let normal = Normal::new(0.0, (2.0 / layer.fan_in as f64).sqrt()).unwrap();
        for w in &mut values[layer.w_off..layer.b_off] {
            *w = normal.sample(&mut rng);
        }
    }
    ParamVector(values)
}

/// Rows of features with labels, nonnegative per-sample weights and
/// augmentation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<u8>,
    weights: Vec<f64>,
    aug_flags: Vec<bool>,
}

impl Batch {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<u8>,
        weights: Vec<f64>,
        aug_flags: Vec<bool>,
    ) -> Result<Self> {
        let n = labels.len();
        if n_features == 0 {
            return Err(FossilError::InvalidInput("batch has zero feature columns".into()));
        }
        ensure_len("batch features", n * n_features, features.len())?;
        ensure_len("batch weights", n, weights.len())?;
        ensure_len("batch aug flags", n, aug_flags.len())?;
        if labels.iter().any(|&y| y > 1) {
            return Err(FossilError::InvalidInput("labels must be binary".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FossilError::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            weights,
            aug_flags,
        })
    }

    /// Unit weights, no augmented rows.
    pub fn unweighted(features: Vec<f64>, n_features: usize, labels: Vec<u8>) -> Result<Self> {
        let n = labels.len();
        Self::new(features, n_features, labels, vec![1.0; n], vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn aug_flags(&self) -> &[bool] {
        &self.aug_flags
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.set_weights(weights)?;
        Ok(self)
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        ensure_len("batch weights", self.len(), weights.len())?;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FossilError::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        self.weights = weights;
        Ok(())
    }
}

/// Per-sample loss applied to the clamped logit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    /// `alpha` weights the positive class and `1 - alpha` the negative one;
    /// `None` weights both by one.
    Focal { gamma: f64, alpha: Option<f64> },
}

impl LossKind {
    /// Loss and its first two derivatives with respect to the (clamped) logit.
    pub fn eval(&self, logit: f64, label: u8) -> (f64, f64, f64) {
        let inside = logit.abs() <= LOGIT_CLAMP;
        let s = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let (l, d1, d2) = match *self {
            LossKind::Bce => {
                let p = sigmoid(s);
                (softplus(s) - f64::from(label) * s, p - f64::from(label), p * (1.0 - p))
            }
            LossKind::Focal { gamma, alpha } => {
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let class_weight = match alpha {
                    Some(a) if label == 1 => a,
                    Some(a) => 1.0 - a,
                    None => 1.0,
                };
                // everything in terms of the true-class margin m = sign * s
                let m = sign * s;
                let q = sigmoid(m);
                let one_minus_q = sigmoid(-m);
                let ln_q = -softplus(-m);
                let a = one_minus_q.powf(gamma);
                let b = gamma * q * ln_q - one_minus_q;
                let f = -a * ln_q;
                let f1 = a * b;
                let f2 = a * (-gamma * q * b + q * one_minus_q * (gamma * ln_q + gamma + 1.0));
                (class_weight * f, class_weight * sign * f1, class_weight * f2)
            }
        };
        if inside {
            (l, d1, d2)
        } else {
            (l, 0.0, 0.0)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-sample forward/backward buffers, reused across rows.
struct Tape {
    layers: Vec<Layer>,
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    r_acts: Vec<Vec<f64>>,
    r_delta: Vec<Vec<f64>>,
}

impl Tape {
    fn new(spec: &MlpSpec) -> Self {
        let layers = spec.layers();
        let sizes = spec.layer_sizes();
        let acts: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let per_layer: Vec<Vec<f64>> = sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
        Self {
            layers,
            r_acts: acts.clone(),
            acts,
            pre: per_layer.clone(),
            delta: per_layer.clone(),
            r_delta: per_layer,
        }
    }

    fn forward(&mut self, p: &[f64], x: &[f64]) -> f64 {
        self.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(l + 1);
            let input = &before[l];
            let z = &mut self.pre[l];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &p[layer.w_off + o * layer.fan_in..layer.w_off + (o + 1) * layer.fan_in];
                *zo = dot(row, input) + p[layer.b_off + o];
            }
            let out = &mut after[0];
            if l == last {
                out.copy_from_slice(z);
            } else {
                for (a, &zv) in out.iter_mut().zip(z.iter()) {
                    *a = zv.max(0.0);
                }
            }
        }
        self.pre[last][0]
    }

    /// Directional derivative of the logit along `v`; requires `forward`.
    fn r_forward(&mut self, p: &[f64], v: &[f64]) -> f64 {
        self.r_acts[0].iter_mut().for_each(|x| *x = 0.0);
        let last = self.layers.len() - 1;
        let mut r_logit = 0.0;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = self.r_acts.split_at_mut(l + 1);
            let r_in = &before[l];
            let a_in = &self.acts[l];
            for o in 0..layer.fan_out {
                let w0 = layer.w_off + o * layer.fan_in;
                let rz = dot(&v[w0..w0 + layer.fan_in], a_in)
                    + dot(&p[w0..w0 + layer.fan_in], r_in)
                    + v[layer.b_off + o];
                if l == last {
                    after[0][o] = rz;
                    r_logit = rz;
                } else {
                    after[0][o] = if self.pre[l][o] > 0.0 { rz } else { 0.0 };
                }
            }
        }
        r_logit
    }

    /// Backpropagates `d_logit`, leaving per-layer deltas on the tape and
    /// accumulating into `grad` when given.
    fn backward(&mut self, p: &[f64], d_logit: f64, mut grad: Option<&mut [f64]>) {
        let last = self.layers.len() - 1;
        self.delta[last][0] = d_logit;
        for l in (0..=last).rev() {
            let layer = self.layers[l];
            if let Some(grad) = grad.as_deref_mut() {
                let input = &self.acts[l];
                for o in 0..layer.fan_out {
                    let d = self.delta[l][o];
                    if d == 0.0 {
                        continue;
                    }
                    let w0 = layer.w_off + o * layer.fan_in;
                    for (g, &a) in grad[w0..w0 + layer.fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[layer.b_off + o] += d;
                }
            }
            if l > 0 {
                let (lower, upper) = self.delta.split_at_mut(l);
                let prev = &mut lower[l - 1];
                prev.iter_mut().for_each(|x| *x = 0.0);
                for (o, &d) in upper[0].iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let w0 = layer.w_off + o * layer.fan_in;
                    for (pi, &w) in prev.iter_mut().zip(&p[w0..w0 + layer.fan_in]) {
                        *pi += w * d;
                    }
                }
                for (pi, &z) in prev.iter_mut().zip(&self.pre[l - 1]) {
                    if z <= 0.0 {
                        *pi = 0.0;
                    }
                }
            }
        }
    }

    /// Forward-mode derivative of `backward` along `v`; requires `forward`,
    /// `r_forward` and `backward` on the same row.
    fn r_backward(&mut self, p: &[f64], v: &[f64], r_d_logit: f64, out: &mut [f64]) {
        let last = self.layers.len() - 1;
        self.r_delta[last][0] = r_d_logit;
        for l in (0..=last).rev() {
            let layer = self.layers[l];
            let input = &self.acts[l];
            let r_input = &self.r_acts[l];
            for o in 0..layer.fan_out {
                let d = self.delta[l][o];
                let rd = self.r_delta[l][o];
                let w0 = layer.w_off + o * layer.fan_in;
                for ((h, &a), &ra) in out[w0..w0 + layer.fan_in].iter_mut().zip(input).zip(r_input) {
                    *h += rd * a + d * ra;
                }
                out[layer.b_off + o] += rd;
            }
            if l > 0 {
                let (lower, upper) = self.r_delta.split_at_mut(l);
                let prev = &mut lower[l - 1];
                prev.iter_mut().for_each(|x| *x = 0.0);
                for o in 0..layer.fan_out {
                    let d = self.delta[l][o];
                    let rd = upper[0][o];
                    if d == 0.0 && rd == 0.0 {
                        continue;
                    }
                    let w0 = layer.w_off + o * layer.fan_in;
                    let wrow = &p[w0..w0 + layer.fan_in];
                    let vrow = &v[w0..w0 + layer.fan_in];
                    for ((pi, &w), &vw) in prev.iter_mut().zip(wrow).zip(vrow) {
                        *pi += vw * d + w * rd;
                    }
                }
                for (pi, &z) in prev.iter_mut().zip(&self.pre[l - 1]) {
                    if z <= 0.0 {
                        *pi = 0.0;
                    }
                }
            }
        }
    }
}

fn check_inputs(spec: &MlpSpec, params: &[f64], n_features: usize) -> Result<()> {
    ensure_len("parameter vector", spec.num_params(), params.len())?;
    ensure_len("feature width", spec.input_dim(), n_features)
}

/// Raw (unclamped) logits for row-major `features`.
pub fn logits(spec: &MlpSpec, params: &[f64], features: &[f64]) -> Result<Vec<f64>> {
    let d = spec.input_dim();
    if !features.len().is_multiple_of(d) {
        return Err(FossilError::DimensionMismatch {
            what: "feature matrix width",
            expected: d,
            got: features.len() % d,
        });
    }
    ensure_len("parameter vector", spec.num_params(), params.len())?;
    let mut tape = Tape::new(spec);
    Ok(features.chunks_exact(d).map(|x| tape.forward(params, x)).collect())
}

/// Probability of the positive class for each row.
pub fn forward(spec: &MlpSpec, params: &[f64], features: &[f64]) -> Result<Vec<f64>> {
    let out: Vec<f64> = logits(spec, params, features)?
        .into_iter()
        .map(|s| sigmoid(s.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
        .collect();
    if out.iter().any(|p| !p.is_finite()) {
        return Err(FossilError::NonFinite("forward pass"));
    }
    Ok(out)
}

/// Unweighted per-sample losses.
pub fn per_sample_losses(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    loss: LossKind,
) -> Result<Vec<f64>> {
    check_inputs(spec, params, batch.n_features())?;
    let mut tape = Tape::new(spec);
    let out: Vec<f64> = (0..batch.len())
        .map(|i| loss.eval(tape.forward(params, batch.row(i)), batch.labels()[i]).0)
        .collect();
    if out.iter().any(|l| !l.is_finite()) {
        return Err(FossilError::NonFinite("per-sample loss"));
    }
    Ok(out)
}

/// `sum_i w_i * loss_i`, not normalized.
pub fn weighted_loss(spec: &MlpSpec, params: &[f64], batch: &Batch, loss: LossKind) -> Result<f64> {
    let losses = per_sample_losses(spec, params, batch, loss)?;
    let total: f64 = losses.iter().zip(batch.weights()).map(|(l, w)| w * l).sum();
    if !total.is_finite() {
        return Err(FossilError::NonFinite("weighted loss"));
    }
    Ok(total)
}

pub fn loss_and_grad(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    loss: LossKind,
) -> Result<(f64, ParamVector)> {
    check_inputs(spec, params, batch.n_features())?;
    let mut tape = Tape::new(spec);
    let mut g = vec![0.0; params.len()];
    let mut total = 0.0;
    for i in 0..batch.len() {
        let w = batch.weights()[i];
        let s = tape.forward(params, batch.row(i));
        let (l, d1, _) = loss.eval(s, batch.labels()[i]);
        total += w * l;
        if w != 0.0 && d1 != 0.0 {
            tape.backward(params, w * d1, Some(&mut g));
        }
    }
    if !total.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(FossilError::NonFinite("gradient"));
    }
    Ok((total, ParamVector(g)))
}

/// Exact gradient of [`weighted_loss`].
pub fn grad(spec: &MlpSpec, params: &[f64], batch: &Batch, loss: LossKind) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch, loss).map(|(_, g)| g)
}

/// Exact Hessian-vector product of [`weighted_loss`] (forward-over-reverse).
pub fn hvp(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    loss: LossKind,
    v: &[f64],
) -> Result<ParamVector> {
    check_inputs(spec, params, batch.n_features())?;
    ensure_len("hvp direction", params.len(), v.len())?;
    let mut tape = Tape::new(spec);
    let mut out = vec![0.0; params.len()];
    for i in 0..batch.len() {
        let w = batch.weights()[i];
        if w == 0.0 {
            continue;
        }
        let s = tape.forward(params, batch.row(i));
        let (_, d1, d2) = loss.eval(s, batch.labels()[i]);
        if d1 == 0.0 && d2 == 0.0 {
            continue;
        }
        let rs = tape.r_forward(params, v);
        tape.backward(params, w * d1, None);
        tape.r_backward(params, v, w * d2 * rs, &mut out);
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(FossilError::NonFinite("Hessian-vector product"));
    }
    Ok(ParamVector(out))
}

/// `grad(loss_i) . v` for every row, ignoring the batch weights.
pub fn directional_derivatives(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    loss: LossKind,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_inputs(spec, params, batch.n_features())?;
    ensure_len("direction", params.len(), v.len())?;
    let mut tape = Tape::new(spec);
    let out: Vec<f64> = (0..batch.len())
        .map(|i| {
            let s = tape.forward(params, batch.row(i));
            let (_, d1, _) = loss.eval(s, batch.labels()[i]);
            if d1 == 0.0 {
                0.0
            } else {
                d1 * tape.r_forward(params, v)
            }
        })
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(FossilError::NonFinite("directional derivative"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// In-place bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [f64], gradient: &[f64]) {
        debug_assert_eq!(params.len(), gradient.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = gradient[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    gradient: &[f64],
) -> Result<(AdamState, ParamVector)> {
    ensure_len("adam moments", state.m.len(), params.len())?;
    ensure_len("adam gradient", params.len(), gradient.len())?;
    let mut next = state.clone();
    let mut p = params.clone();
    next.update(&mut p, gradient);
    Ok((next, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Batch {
        let features = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let weights = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        Batch::new(features, d, labels, weights, vec![false; n]).unwrap()
    }

    /// He init plus random biases, so no pre-activation sits exactly on the
    /// ReLU kink (zero biases make dead units produce exact zeros).
    fn jittered_params(spec: &MlpSpec, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut p = init_params(spec, seed);
        p.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
        p
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn param_count_matches_layer_arithmetic() {
        let spec = MlpSpec::default();
        assert_eq!(spec.num_params(), 20 * 64 + 64 + 64 * 64 + 64 + 64 + 1);
        assert_eq!(init_params(&spec, 7).len(), 5569);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = MlpSpec::new(vec![2, 1]).unwrap();
        assert_eq!(init_params(&spec, 42), init_params(&spec, 42));
        assert_ne!(init_params(&spec, 42), init_params(&spec, 43));
        // biases start at zero
        assert_eq!(init_params(&spec, 42)[2], 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 2]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1]).is_err());
    }

    #[test]
    fn forward_examples() {
        let spec = MlpSpec::default();
        let zeros = ParamVector::zeros(spec.num_params());
        let x = vec![0.3; 20 * 3];
        for p in forward(&spec, &zeros, &x).unwrap() {
            assert_eq!(p, 0.5);
        }
        let tiny = MlpSpec::new(vec![1, 1]).unwrap();
        assert_eq!(forward(&tiny, &[1.0, 0.0], &[0.0]).unwrap(), vec![0.5]);
        let p = forward(&tiny, &[2.0, -1.0], &[1.0]).unwrap()[0];
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(forward(&tiny, &[1.0, 0.0], &[1.0, 2.0, 3.0, 4.0]).is_ok());
        assert!(forward(&spec, &zeros, &[1.0; 7]).is_err());
    }

    #[test]
    fn weighted_loss_examples() {
        let tiny = MlpSpec::new(vec![1, 1]).unwrap();
        let params = [0.0, 0.0];
        let batch = Batch::new(vec![1.0], 1, vec![1], vec![1.0], vec![false]).unwrap();
        let l = weighted_loss(&tiny, &params, &batch, LossKind::Bce).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let batch2 = batch.clone().with_weights(vec![2.0]).unwrap();
        let l2 = weighted_loss(&tiny, &params, &batch2, LossKind::Bce).unwrap();
        assert!((l2 - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let batch0 = batch.with_weights(vec![0.0]).unwrap();
        assert_eq!(weighted_loss(&tiny, &params, &batch0, LossKind::Bce).unwrap(), 0.0);
    }

    #[test]
    fn clamped_logits_keep_loss_finite() {
        let tiny = MlpSpec::new(vec![1, 1]).unwrap();
        let batch = Batch::unweighted(vec![1.0], 1, vec![0]).unwrap();
        let l = weighted_loss(&tiny, &[1e6, 0.0], &batch, LossKind::Bce).unwrap();
        assert!((l - 30.0).abs() < 1e-9);
        let g = grad(&tiny, &[1e6, 0.0], &batch, LossKind::Bce).unwrap();
        assert_eq!(g.into_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(Batch::new(vec![1.0], 1, vec![1], vec![-1.0], vec![false]).is_err());
        assert!(Batch::new(vec![1.0], 1, vec![2], vec![1.0], vec![false]).is_err());
        assert!(Batch::new(vec![1.0, 2.0], 1, vec![1], vec![1.0], vec![false]).is_err());
    }

    #[test]
    fn loss_derivatives_match_finite_differences() {
        let kinds = [
            LossKind::Bce,
            LossKind::Focal { gamma: 2.0, alpha: None },
            LossKind::Focal { gamma: 3.0, alpha: Some(0.25) },
            LossKind::Focal { gamma: 0.5, alpha: Some(0.7) },
        ];
        let h = 1e-5;
        for kind in kinds {
            for y in [0u8, 1] {
                for s in [-4.0, -1.3, -0.2, 0.0, 0.4, 2.2, 6.0] {
                    let (_, d1, d2) = kind.eval(s, y);
                    let fd1 = (kind.eval(s + h, y).0 - kind.eval(s - h, y).0) / (2.0 * h);
                    let fd2 = (kind.eval(s + h, y).1 - kind.eval(s - h, y).1) / (2.0 * h);
                    assert!((d1 - fd1).abs() < 1e-7, "{kind:?} y={y} s={s}: {d1} vs {fd1}");
                    assert!((d2 - fd2).abs() < 1e-7, "{kind:?} y={y} s={s}: {d2} vs {fd2}");
                }
            }
        }
    }

    #[test]
    fn grad_linear_in_weights_and_zero_for_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(vec![4, 8, 1]).unwrap();
        let params = init_params(&spec, 1);
        let batch = random_batch(&mut rng, 10, 4);
        let g = grad(&spec, &params, &batch, LossKind::Bce).unwrap();
        let doubled: Vec<f64> = batch.weights().iter().map(|w| 2.0 * w).collect();
        let g2 = grad(&spec, &params, &batch.clone().with_weights(doubled).unwrap(), LossKind::Bce)
            .unwrap();
        for (a, b) in g.iter().zip(g2.iter()) {
            assert_eq!(2.0 * a, *b);
        }
        let zero = batch.with_weights(vec![0.0; 10]).unwrap();
        assert!(grad(&spec, &params, &zero, LossKind::Bce).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MlpSpec::new(vec![5, 7, 6, 1]).unwrap();
        for trial in 0..10 {
            let params = jittered_params(&spec, trial);
            let batch = random_batch(&mut rng, 12, 5);
            for kind in [LossKind::Bce, LossKind::Focal { gamma: 2.0, alpha: Some(0.25) }] {
                let g = grad(&spec, &params, &batch, kind).unwrap();
                for _ in 0..20 {
                    let k = rng.gen_range(0..params.len());
                    let h = 1e-4;
                    let mut plus = params.clone();
                    plus[k] += h;
                    let mut minus = params.clone();
                    minus[k] -= h;
                    let fd = (weighted_loss(&spec, &plus, &batch, kind).unwrap()
                        - weighted_loss(&spec, &minus, &batch, kind).unwrap())
                        / (2.0 * h);
                    assert!(rel_err(g[k], fd) < 1e-4, "coord {k}: {} vs {fd}", g[k]);
                }
            }
        }
    }

    #[test]
    fn hvp_matches_finite_differenced_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(vec![4, 6, 5, 1]).unwrap();
        for trial in 0..5 {
            let params = jittered_params(&spec, 100 + trial);
            let batch = random_batch(&mut rng, 15, 4);
            let v: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hv = hvp(&spec, &params, &batch, LossKind::Bce, &v).unwrap();
            let eps = 1e-5;
            let shifted = |sign: f64| {
                let p: Vec<f64> = params.iter().zip(&v).map(|(a, b)| a + sign * eps * b).collect();
                grad(&spec, &p, &batch, LossKind::Bce).unwrap()
            };
            let (gp, gm) = (shifted(1.0), shifted(-1.0));
            let scale = hv.norm();
            for k in 0..params.len() {
                let fd = (gp[k] - gm[k]) / (2.0 * eps);
                assert!((hv[k] - fd).abs() <= 1e-3 * scale.max(1e-8), "{k}: {} vs {fd}", hv[k]);
            }
        }
    }

    #[test]
    fn hvp_of_logistic_regression_matches_analytic_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = MlpSpec::new(vec![3, 1]).unwrap();
        let params: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = random_batch(&mut rng, 9, 3);
        let v = [0.3, -0.7, 1.1, 0.5];
        let hv = hvp(&spec, &params, &batch, LossKind::Bce, &v).unwrap();
        let mut expected = [0.0; 4];
        for i in 0..batch.len() {
            let x = [batch.row(i)[0], batch.row(i)[1], batch.row(i)[2], 1.0];
            let s = dot(&params, &x);
            let p = sigmoid(s);
            let c = batch.weights()[i] * p * (1.0 - p) * dot(&x, &v);
            for k in 0..4 {
                expected[k] += c * x[k];
            }
        }
        for k in 0..4 {
            assert!((hv[k] - expected[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn hvp_symmetric_and_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = MlpSpec::new(vec![6, 10, 1]).unwrap();
        let params = jittered_params(&spec, 9);
        let batch = random_batch(&mut rng, 20, 6);
        let kind = LossKind::Focal { gamma: 2.0, alpha: None };
        let u: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hu = hvp(&spec, &params, &batch, kind, &u).unwrap();
        let hv = hvp(&spec, &params, &batch, kind, &v).unwrap();
        let (a, b) = (hv.dot(&u), hu.dot(&v));
        assert!(rel_err(a, b) < 1e-8, "{a} vs {b}");
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let h3 = hvp(&spec, &params, &batch, kind, &v3).unwrap();
        for (x, y) in h3.iter().zip(hv.iter()) {
            assert!((x - 3.0 * y).abs() <= 1e-10 * x.abs().max(1e-12));
        }
        let zero = hvp(&spec, &params, &batch, kind, &vec![0.0; params.len()]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn directional_derivatives_match_per_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = MlpSpec::new(vec![3, 5, 1]).unwrap();
        let params = init_params(&spec, 4);
        let batch = random_batch(&mut rng, 6, 3);
        let v: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dd = directional_derivatives(&spec, &params, &batch, LossKind::Bce, &v).unwrap();
        for i in 0..batch.len() {
            let mut w = vec![0.0; batch.len()];
            w[i] = 1.0;
            let single = batch.clone().with_weights(w).unwrap();
            let g = grad(&spec, &params, &single, LossKind::Bce).unwrap();
            assert!((g.dot(&v) - dd[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_examples() {
        let state = AdamState::new(1, 0.1);
        let p = ParamVector::from_vec(vec![1.0]);
        let (_, same) = adam_step(&state, &p, &[0.0]).unwrap();
        assert_eq!(same, p);
        let (_, down) = adam_step(&state, &p, &[2.0]).unwrap();
        assert!(down[0] < 1.0);

        let mut state = AdamState::new(1, 0.1);
        let mut theta = ParamVector::from_vec(vec![0.0]);
        for _ in 0..500 {
            let g = [2.0 * (theta[0] - 3.0)];
            let (s, t) = adam_step(&state, &theta, &g).unwrap();
            state = s;
            theta = t;
        }
        assert!((theta[0] - 3.0).abs() < 1e-2, "{}", theta[0]);
    }
}
