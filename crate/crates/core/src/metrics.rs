//! Evaluation metrics and trajectory bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, FossilError, Result};

/// Decision threshold applied to positive-class probabilities.
pub const THRESHOLD: f64 = 0.5;

fn check_both_classes(labels: &[u8]) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(FossilError::InvalidInput("both classes must be present".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    ensure_len("auc labels", scores.len(), labels.len())?;
    check_both_classes(labels)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FossilError::NonFinite("auc scores"));
    }
    let ranks = average_ranks(scores);
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// One-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub balanced_accuracy: f64,
    pub gmean: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn confusion_metrics(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMetrics> {
    ensure_len("confusion labels", predictions.len(), labels.len())?;
    check_both_classes(labels)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => tn += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let recall = ratio(tp, tp + fneg);
    let specificity = ratio(tn, tn + fp);
    let precision = ratio(tp, tp + fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(ConfusionMetrics {
        balanced_accuracy: (recall + specificity) / 2.0,
        gmean: (recall * specificity).sqrt(),
        precision,
        recall,
        f1,
        specificity,
        degenerate,
    })
}

pub fn predict(probabilities: &[f64]) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p >= THRESHOLD)).collect()
}

/// Expected calibration error over equal-width bins. Confidence is the mean
/// positive-class probability in a bin, accuracy the positive-label rate.
pub fn ece(scores: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    ensure_len("ece labels", scores.len(), labels.len())?;
    if bins == 0 {
        return Err(FossilError::InvalidInput("ece needs at least one bin".into()));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(FossilError::InvalidInput("ece scores must lie in [0, 1]".into()));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = ((s * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += s;
        acc[b] += f64::from(y);
    }
    let n = scores.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            c / n * (acc[b] / c - conf[b] / c).abs()
        })
        .sum())
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(FossilError::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        return Err(FossilError::InvalidInput("effective sample size of all-zero weights".into()));
    }
    Ok(s * s / s2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub n_eff: f64,
}

impl WeightSummary {
    pub fn of(weights: &[f64]) -> Result<Self> {
        let n_eff = effective_sample_size(weights)?;
        Ok(Self {
            min: weights.iter().copied().fold(f64::INFINITY, f64::min),
            max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: weights.iter().sum::<f64>() / weights.len() as f64,
            n_eff,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_balanced_error: f64,
    pub val_loss: f64,
    pub weights: WeightSummary,
    pub cg_residual: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    records: Vec<EpochRecord>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; epochs must strictly increase and the error must lie
    /// in [0, 1].
    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(FossilError::InvalidInput(format!(
                    "epoch {} does not follow {}",
                    record.epoch, last.epoch
                )));
            }
        }
        if !(0.0..=1.0).contains(&record.val_balanced_error) {
            return Err(FossilError::InvalidInput("balanced error outside [0, 1]".into()));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_balanced_error).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegretMode {
    Static,
    Dynamic,
}

/// Static: mean error minus the best error of the run. Dynamic: mean excess
/// over the running minimum.
pub fn regret_from_errors(errors: &[f64], mode: RegretMode) -> Result<f64> {
    if errors.is_empty() {
        return Err(FossilError::InvalidInput("regret of an empty trajectory".into()));
    }
    let t = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / t;
    Ok(match mode {
        RegretMode::Static => mean - errors.iter().copied().fold(f64::INFINITY, f64::min),
        RegretMode::Dynamic => {
            let mut best = f64::INFINITY;
            errors
                .iter()
                .map(|&e| {
                    best = best.min(e);
                    e - best
                })
                .sum::<f64>()
                / t
        }
    })
}

pub fn regret_from_trajectory(trajectory: &Trajectory, mode: RegretMode) -> Result<f64> {
    regret_from_errors(&trajectory.errors(), mode)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub balanced_accuracy: f64,
    pub gmean: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub ece: f64,
    pub n_eff: f64,
    pub static_regret: f64,
    pub dynamic_regret: f64,
}

impl MetricsReport {
    /// Test-set metrics from final probabilities plus run-level quantities.
    pub fn evaluate(probabilities: &[f64], labels: &[u8], n_eff: f64, trajectory: &Trajectory) -> Result<Self> {
        let cm = confusion_metrics(&predict(probabilities), labels)?;
        Ok(Self {
            auc: roc_auc(probabilities, labels)?,
            balanced_accuracy: cm.balanced_accuracy,
            gmean: cm.gmean,
            precision: cm.precision,
            recall: cm.recall,
            f1: cm.f1,
            specificity: cm.specificity,
            ece: ece(probabilities, labels, 10)?,
            n_eff,
            static_regret: regret_from_trajectory(trajectory, RegretMode::Static)?,
            dynamic_regret: regret_from_trajectory(trajectory, RegretMode::Dynamic)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6, 0.2], &[1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = 40;
            // coarse scores so ties occur
            let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if y[i] == 1 && y[j] == 0 {
                        den += 1.0;
                        num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            assert!((roc_auc(&s, &y).unwrap() - num / den).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            s in prop::collection::vec(-5.0f64..5.0, 4..30),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut y: Vec<u8> = (0..s.len()).map(|_| rng.gen_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            let t: Vec<f64> = s.iter().map(|x| (2.0 * x).exp() + 3.0).collect();
            prop_assert!((roc_auc(&s, &y).unwrap() - roc_auc(&t, &y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn static_regret_dominates_dynamic(e in prop::collection::vec(0.0f64..1.0, 1..40)) {
            let s = regret_from_errors(&e, RegretMode::Static).unwrap();
            let d = regret_from_errors(&e, RegretMode::Dynamic).unwrap();
            prop_assert!(d >= 0.0 && s >= d - 1e-12);
        }
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        for v in [m.balanced_accuracy, m.gmean, m.precision, m.recall, m.f1, m.specificity] {
            assert_eq!(v, 1.0);
        }
        // 10 positives with 8 caught, 10 negatives with 9 rejected
        let mut y = vec![1u8; 10];
        y.extend([0u8; 10]);
        let mut p = vec![1u8; 8];
        p.extend([0u8; 2]);
        p.extend([0u8; 9]);
        p.push(1);
        let m = confusion_metrics(&p, &y).unwrap();
        assert!((m.gmean - 0.848_528_137_423_857).abs() < 1e-6);
        assert!((m.balanced_accuracy - 0.85).abs() < 1e-12);
        let m = confusion_metrics(&[0; 4], &[1, 0, 0, 0]).unwrap();
        assert_eq!((m.recall, m.balanced_accuracy, m.precision), (0.0, 0.5, 0.0));
        assert!(m.degenerate);
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0; 4], &[1; 4], 10).unwrap(), 0.0);
        assert!((ece(&[0.75; 4], &[1, 0, 1, 0], 10).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(ece(&[0.0; 3], &[1; 3], 10).unwrap(), 1.0);
        assert!(ece(&[1.2], &[1], 10).is_err());
    }

    #[test]
    fn n_eff_examples() {
        assert!((effective_sample_size(&[0.01; 100]).unwrap() - 100.0).abs() < 1e-9);
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 2.5;
        assert_eq!(effective_sample_size(&one_hot).unwrap(), 1.0);
        assert_eq!(effective_sample_size(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 2.0);
        assert!(effective_sample_size(&[0.0, 0.0]).is_err());
        let w = [0.3, 1.2, 0.7];
        let scaled: Vec<f64> = w.iter().map(|x| x * 17.0).collect();
        assert!((effective_sample_size(&w).unwrap() - effective_sample_size(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn regret_examples() {
        assert_eq!(regret_from_errors(&[0.3; 5], RegretMode::Static).unwrap(), 0.0);
        assert_eq!(regret_from_errors(&[0.3; 5], RegretMode::Dynamic).unwrap(), 0.0);
        let e = [0.5, 0.3, 0.2];
        assert!((regret_from_errors(&e, RegretMode::Static).unwrap() - 0.133_333_333_333_333_3).abs() < 1e-12);
        assert!(regret_from_errors(&e, RegretMode::Dynamic).unwrap().abs() < 1e-15);
        assert!((regret_from_errors(&[0.2, 0.4], RegretMode::Dynamic).unwrap() - 0.1).abs() < 1e-15);
        assert!(regret_from_errors(&[], RegretMode::Static).is_err());
    }

    #[test]
    fn trajectory_rejects_bad_records() {
        let rec = |epoch, e| EpochRecord {
            epoch,
            val_balanced_error: e,
            val_loss: 0.0,
            weights: WeightSummary::default(),
            cg_residual: None,
        };
        let mut t = Trajectory::new();
        t.push(rec(0, 0.4)).unwrap();
        assert!(t.push(rec(0, 0.3)).is_err());
        assert!(t.push(rec(1, 1.3)).is_err());
        t.push(rec(2, 0.3)).unwrap();
        assert_eq!(t.errors(), vec![0.4, 0.3]);
    }
}
