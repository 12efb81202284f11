//! Closed-form per-sample weights.
//!
//! A weight is the product of four factors: a class-prior correction
//! `min(1/(K p(y)), class_clamp)`, a difficulty factor `exp(-d/T_t)`, an
//! augmentation discount `1 - gamma_t` applied to synthetic rows, and a
//! warmup ramp `min(1, (t+1)/t_warm)`. In stage mode the difficulty factor
//! is replaced by a piecewise-constant multiplier.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, FossilError, Result};

/// Hard ceiling on the augmentation discount; keeps `1 - gamma_t > 0`.
pub const GAMMA_CAP: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FossilConfig {
    pub num_classes: usize,
    /// Filled from the training labels by the harness when left empty.
    #[serde(default)]
    pub class_priors: Vec<f64>,
    pub t_warm: usize,
    #[serde(rename = "T0")]
    pub t0: f64,
    pub min_temp: f64,
    pub temp_decay: f64,
    pub gamma_scale: f64,
    pub gamma_max: f64,
    /// `null` in JSON means uncapped.
    #[serde(with = "infinite_as_null")]
    pub class_clamp: f64,
    pub stage_mode: bool,
    pub stage_thresholds: Vec<f64>,
    pub stage_multipliers: Vec<f64>,
    pub total_epochs: usize,
}

impl Default for FossilConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            class_priors: vec![0.5, 0.5],
            t_warm: 5,
            t0: 1.0,
            min_temp: 0.05,
            temp_decay: 3.0,
            gamma_scale: 1.0,
            gamma_max: 1.0,
            class_clamp: f64::INFINITY,
            stage_mode: false,
            stage_thresholds: vec![0.25, 0.5, 0.75],
            stage_multipliers: vec![0.9, 1.0, 1.1, 1.2],
            total_epochs: 50,
        }
    }
}

impl FossilConfig {
    /// Tuned setting: low temperature floor, longer warmup, capped class term.
    pub fn tuned() -> Self {
        Self {
            t_warm: 10,
            min_temp: 0.005,
            gamma_scale: 1.0,
            gamma_max: 2.0,
            class_clamp: 12.0,
            ..Self::default()
        }
    }

    pub fn with_priors(mut self, priors: Vec<f64>) -> Self {
        self.num_classes = priors.len();
        self.class_priors = priors;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FossilError::InvalidConfig(msg.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.class_priors.len() != self.num_classes {
            return bad("class_priors must have one entry per class");
        }
        if self.class_priors.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return bad("class priors must lie in (0, 1]");
        }
        if (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("class priors must sum to 1");
        }
        if !(self.t0 > 0.0 && self.min_temp > 0.0 && self.min_temp <= self.t0) {
            return bad("temperatures must satisfy 0 < min_temp <= T0");
        }
        if !(self.temp_decay > 0.0) {
            return bad("temp_decay must be positive");
        }
        if !(self.gamma_scale >= 0.0 && self.gamma_max >= 0.0) {
            return bad("gamma_scale and gamma_max must be nonnegative");
        }
        if !(self.class_clamp > 0.0) {
            return bad("class_clamp must be positive");
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive");
        }
        check_stages(&self.stage_thresholds, &self.stage_multipliers)
    }

    pub fn schedule_at(&self, t: usize) -> ScheduleValues {
        ScheduleValues {
            temperature: temperature_at(t, self),
            gamma: gamma_at(t, self),
            warmup: warmup_at(t, self),
        }
    }
}

fn check_stages(thresholds: &[f64], multipliers: &[f64]) -> Result<()> {
    if thresholds.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(FossilError::InvalidConfig("stage thresholds must lie in (0, 1)".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FossilError::InvalidConfig(
            "stage thresholds must be strictly increasing".into(),
        ));
    }
    if multipliers.len() != thresholds.len() + 1 {
        return Err(FossilError::InvalidConfig(
            "need exactly one more stage multiplier than thresholds".into(),
        ));
    }
    if multipliers.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(FossilError::InvalidConfig("stage multipliers must be positive".into()));
    }
    Ok(())
}

pub(crate) mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Values of the time-dependent factors at one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub temperature: f64,
    pub gamma: f64,
    pub warmup: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    SoftmaxConfidence,
    Entropy,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProxy {
    pub kind: ProxyKind,
    #[serde(default = "default_loss_cap")]
    pub loss_cap_percentile: f64,
}

fn default_loss_cap() -> f64 {
    0.95
}

impl Default for DifficultyProxy {
    fn default() -> Self {
        Self::new(ProxyKind::SoftmaxConfidence)
    }
}

impl DifficultyProxy {
    pub fn new(kind: ProxyKind) -> Self {
        Self {
            kind,
            loss_cap_percentile: default_loss_cap(),
        }
    }
}

/// `min(1/(K p(y_i)), class_clamp)` per sample.
pub fn class_term(labels: &[u8], config: &FossilConfig) -> Result<Vec<f64>> {
    let k = config.num_classes as f64;
    labels
        .iter()
        .map(|&y| {
            let prior = *config.class_priors.get(usize::from(y)).ok_or_else(|| {
                FossilError::InvalidInput(format!(
                    "label {y} out of range for {} classes",
                    config.num_classes
                ))
            })?;
            if !(prior > 0.0) {
                return Err(FossilError::InvalidInput(format!("class {y} has zero prior")));
            }
            Ok((1.0 / (k * prior)).min(config.class_clamp))
        })
        .collect()
}

/// Linear-interpolated quantile (`q` in `[0, 1]`) of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-sample difficulty in `[0, 1]` from positive-class probabilities.
///
/// `losses` is only read by the loss proxy; it is normalized by the
/// configured percentile of the same losses.
pub fn difficulty_scores(
    proxy: &DifficultyProxy,
    probabilities: &[f64],
    labels: &[u8],
    losses: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if probabilities.is_empty() {
        return Err(FossilError::InvalidInput("difficulty of an empty set".into()));
    }
    ensure_len("difficulty labels", probabilities.len(), labels.len())?;
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(FossilError::InvalidInput("probabilities must lie in [0, 1]".into()));
    }
    match proxy.kind {
        ProxyKind::SoftmaxConfidence => Ok(probabilities.iter().map(|&p| 1.0 - p.max(1.0 - p)).collect()),
        ProxyKind::Entropy => Ok(probabilities
            .iter()
            .map(|&p| (binary_entropy(p) / std::f64::consts::LN_2).clamp(0.0, 1.0))
            .collect()),
        ProxyKind::Loss => {
            let losses = losses.ok_or_else(|| {
                FossilError::InvalidInput("loss proxy requires per-sample losses".into())
            })?;
            ensure_len("difficulty losses", probabilities.len(), losses.len())?;
            if !(proxy.loss_cap_percentile > 0.0 && proxy.loss_cap_percentile <= 1.0) {
                return Err(FossilError::InvalidConfig(
                    "loss_cap_percentile must lie in (0, 1]".into(),
                ));
            }
            let cap = quantile(losses, proxy.loss_cap_percentile);
            if !(cap > 0.0) {
                return Ok(vec![0.0; losses.len()]);
            }
            Ok(losses.iter().map(|&l| (l.max(0.0) / cap).min(1.0)).collect())
        }
    }
}

fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.ln() };
    h(p) + h(1.0 - p)
}

/// `max(min_temp, T0 exp(-temp_decay t / total_epochs))`.
pub fn temperature_at(t: usize, config: &FossilConfig) -> f64 {
    let frac = t as f64 / config.total_epochs as f64;
    (config.t0 * (-config.temp_decay * frac).exp()).max(config.min_temp)
}

/// `min(gamma_scale t / total_epochs, gamma_max, GAMMA_CAP)`.
pub fn gamma_at(t: usize, config: &FossilConfig) -> f64 {
    let frac = t as f64 / config.total_epochs as f64;
    (config.gamma_scale * frac).min(config.gamma_max).min(GAMMA_CAP)
}

/// `min(1, (t + 1) / t_warm)`; the `+1` keeps epoch zero strictly positive.
pub fn warmup_at(t: usize, config: &FossilConfig) -> f64 {
    if config.t_warm == 0 {
        1.0
    } else {
        ((t + 1) as f64 / config.t_warm as f64).min(1.0)
    }
}

/// Weights at epoch `t` from the configured schedules.
pub fn fossil_weights(
    t: usize,
    config: &FossilConfig,
    d: &[f64],
    labels: &[u8],
    aug_flags: &[bool],
) -> Result<Vec<f64>> {
    weights_with_schedule(config.schedule_at(t), config, d, labels, aug_flags)
}

/// Weights for explicitly supplied schedule values.
pub fn weights_with_schedule(
    schedule: ScheduleValues,
    config: &FossilConfig,
    d: &[f64],
    labels: &[u8],
    aug_flags: &[bool],
) -> Result<Vec<f64>> {
    ensure_len("weight labels", d.len(), labels.len())?;
    ensure_len("weight aug flags", d.len(), aug_flags.len())?;
    if d.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(FossilError::InvalidInput("difficulty must lie in [0, 1]".into()));
    }
    if !(schedule.temperature > 0.0) || !(0.0..=1.0).contains(&schedule.gamma) {
        return Err(FossilError::InvalidInput(
            "schedule needs T_t > 0 and gamma_t in [0, 1]".into(),
        ));
    }
    let class = class_term(labels, config)?;
    let difficulty = if config.stage_mode {
        stage_weights(d, config)?
    } else {
        d.iter().map(|&di| (-di / schedule.temperature).exp()).collect()
    };
    Ok(class
        .iter()
        .zip(&difficulty)
        .zip(aug_flags)
        .map(|((c, f), &aug)| {
            let penalty = if aug { 1.0 - schedule.gamma } else { 1.0 };
            c * f * penalty * schedule.warmup
        })
        .collect())
}

/// Piecewise-constant difficulty multipliers; a value equal to a threshold
/// falls in the upper interval.
pub fn stage_weights(d: &[f64], config: &FossilConfig) -> Result<Vec<f64>> {
    check_stages(&config.stage_thresholds, &config.stage_multipliers)?;
    Ok(d.iter()
        .map(|&x| {
            let idx = config.stage_thresholds.iter().filter(|&&th| th <= x).count();
            config.stage_multipliers[idx]
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Easy,
    Medium,
    Hard,
}

/// Tertile split at the 1/3 and 2/3 quantiles.
pub fn stage_split(d: &[f64]) -> Vec<Stage> {
    stage_split_at(d, 1.0 / 3.0, 2.0 / 3.0)
}

/// Quantile split; ties with a cut point fall in the lower stage.
pub fn stage_split_at(d: &[f64], q_low: f64, q_high: f64) -> Vec<Stage> {
    if d.is_empty() {
        return Vec::new();
    }
    let mut sorted = d.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, q_low);
    let hi = quantile_sorted(&sorted, q_high);
    d.iter()
        .map(|&x| {
            if x <= lo {
                Stage::Easy
            } else if x <= hi {
                Stage::Medium
            } else {
                Stage::Hard
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(priors: &[f64]) -> FossilConfig {
        FossilConfig::default().with_priors(priors.to_vec())
    }

    #[test]
    fn class_term_examples() {
        assert_eq!(class_term(&[0], &cfg(&[0.5, 0.5])).unwrap(), vec![1.0]);
        let w = class_term(&[1], &cfg(&[0.9, 0.1])).unwrap()[0];
        assert!((w - 5.0).abs() < 1e-12);
        let mut capped = cfg(&[0.99, 0.01]);
        capped.class_clamp = 12.0;
        assert_eq!(class_term(&[1], &capped).unwrap(), vec![12.0]);
        capped.class_clamp = f64::INFINITY;
        assert!((class_term(&[1], &capped).unwrap()[0] - 50.0).abs() < 1e-9);
        assert!(class_term(&[2], &cfg(&[0.5, 0.5])).is_err());
        let mut zero = cfg(&[1.0, 0.0]);
        zero.class_priors = vec![1.0, 0.0];
        assert!(class_term(&[1], &zero).is_err());
    }

    #[test]
    fn difficulty_examples() {
        let soft = DifficultyProxy::default();
        assert_eq!(difficulty_scores(&soft, &[1.0], &[1], None).unwrap(), vec![0.0]);
        assert_eq!(difficulty_scores(&soft, &[0.5], &[1], None).unwrap(), vec![0.5]);
        let ent = DifficultyProxy::new(ProxyKind::Entropy);
        let d = difficulty_scores(&ent, &[0.5, 1.0, 0.0], &[0, 1, 1], None).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert_eq!(&d[1..], &[0.0, 0.0]);
        assert!(difficulty_scores(&soft, &[], &[], None).is_err());
        assert!(difficulty_scores(&soft, &[1.2], &[1], None).is_err());
    }

    #[test]
    fn loss_proxy_caps_at_percentile() {
        let proxy = DifficultyProxy::new(ProxyKind::Loss);
        let losses: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let probs = vec![0.5; 101];
        let labels = vec![1; 101];
        let d = difficulty_scores(&proxy, &probs, &labels, Some(&losses)).unwrap();
        assert!((d[50] - 50.0 / 95.0).abs() < 1e-12);
        assert_eq!(d[100], 1.0);
        assert!(difficulty_scores(&proxy, &probs, &labels, None).is_err());
        let zeros = difficulty_scores(&proxy, &[0.5], &[1], Some(&[0.0])).unwrap();
        assert_eq!(zeros, vec![0.0]);
    }

    #[test]
    fn temperature_examples() {
        let c = FossilConfig { min_temp: 0.005, ..FossilConfig::default() };
        assert_eq!(temperature_at(0, &c), 1.0);
        assert!((temperature_at(50, &c) - 0.049_787_068_367_863_94).abs() < 1e-12);
        assert_eq!(temperature_at(100_000, &c), 0.005);
    }

    #[test]
    fn gamma_examples() {
        let mut c = FossilConfig::default();
        assert_eq!(gamma_at(0, &c), 0.0);
        c.gamma_max = 2.0;
        assert!((gamma_at(25, &c) - 0.5).abs() < 1e-12);
        c.gamma_scale = 2.0;
        c.gamma_max = 3.0;
        assert_eq!(gamma_at(50, &c), GAMMA_CAP);
    }

    #[test]
    fn weight_examples() {
        let c = cfg(&[0.5, 0.5]);
        let w = fossil_weights(10, &c, &[0.0], &[0], &[false]).unwrap();
        assert_eq!(w, vec![1.0]);

        let c = cfg(&[0.9, 0.1]);
        let sched = ScheduleValues {
            temperature: 1.0,
            gamma: 0.2,
            warmup: 1.0,
        };
        let w = weights_with_schedule(sched, &c, &[0.5], &[1], &[true]).unwrap()[0];
        assert!((w - 2.426_122_638_850_534).abs() < 1e-9, "{w}");

        let sched = ScheduleValues {
            temperature: 1e9,
            gamma: 0.0,
            warmup: 1.0,
        };
        let d = [0.0, 0.3, 0.9, 1.0];
        let labels = [0, 1, 1, 0];
        let w = weights_with_schedule(sched, &c, &d, &labels, &[false, true, false, true]).unwrap();
        let expected = class_term(&labels, &c).unwrap();
        for (a, b) in w.iter().zip(&expected) {
            assert!((a - b).abs() / b < 1e-9);
        }
    }

    #[test]
    fn warmup_keeps_epoch_zero_positive() {
        let c = FossilConfig::tuned();
        assert!((warmup_at(0, &c) - 0.1).abs() < 1e-15);
        assert_eq!(warmup_at(9, &c), 1.0);
        let w = fossil_weights(0, &c, &[1.0], &[0], &[true]).unwrap()[0];
        assert!(w > 0.0);
    }

    #[test]
    fn stage_weight_examples() {
        let c = FossilConfig::default();
        assert_eq!(stage_weights(&[0.1, 0.5, 0.99, 0.25], &c).unwrap(), vec![0.9, 1.1, 1.2, 1.0]);
        let mut bad = c.clone();
        bad.stage_multipliers.pop();
        assert!(stage_weights(&[0.1], &bad).is_err());
        bad.stage_multipliers.push(1.0);
        bad.stage_thresholds = vec![0.5, 0.25, 0.75];
        assert!(stage_weights(&[0.1], &bad).is_err());
    }

    #[test]
    fn stage_split_examples() {
        use Stage::*;
        assert_eq!(stage_split(&[0.1, 0.5, 0.9]), vec![Easy, Medium, Hard]);
        assert!(stage_split(&[0.3; 7]).iter().all(|&s| s == Easy));
        let d: Vec<f64> = (0..300).map(|i| ((i * 7919) % 300) as f64 / 300.0 + 1e-4).collect();
        let st = stage_split(&d);
        for stage in [Easy, Medium, Hard] {
            let c = st.iter().filter(|&&s| s == stage).count();
            assert!((99..=101).contains(&c), "{stage:?}: {c}");
        }
    }

    #[test]
    fn config_json_uses_null_for_uncapped_clamp() {
        let c = FossilConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"class_clamp\":null"));
        assert!(json.contains("\"T0\":1.0"));
        let back: FossilConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let tuned: FossilConfig = serde_json::from_str(&serde_json::to_string(&FossilConfig::tuned()).unwrap()).unwrap();
        assert_eq!(tuned.class_clamp, 12.0);
    }

    #[test]
    fn validation_catches_bad_configs() {
        assert!(FossilConfig::default().validate().is_ok());
        assert!(cfg(&[0.7, 0.2]).validate().is_err());
        let c = FossilConfig { min_temp: 2.0, ..FossilConfig::default() };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn weights_bounded_by_class_term(
            d in 0.0f64..=1.0,
            t in 0usize..200,
            minority in 0.01f64..0.5,
            clamp in prop_oneof![Just(f64::INFINITY), 1.0f64..20.0],
            aug in any::<bool>(),
            label in 0u8..2,
        ) {
            let mut c = FossilConfig::tuned().with_priors(vec![1.0 - minority, minority]);
            c.class_clamp = clamp;
            c.gamma_scale = 3.0;
            c.gamma_max = 3.0;
            let w = fossil_weights(t, &c, &[d], &[label], &[aug]).unwrap()[0];
            let bound = class_term(&[label], &c).unwrap()[0];
            prop_assert!(w > 0.0);
            prop_assert!(w <= bound);
        }

        #[test]
        fn schedules_monotone(t in 0usize..500) {
            let c = FossilConfig::tuned();
            prop_assert!(temperature_at(t + 1, &c) <= temperature_at(t, &c));
            prop_assert!(gamma_at(t + 1, &c) >= gamma_at(t, &c));
            prop_assert!(warmup_at(t + 1, &c) >= warmup_at(t, &c));
        }
    }
}
