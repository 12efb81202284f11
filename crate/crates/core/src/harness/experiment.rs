use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MethodEntry, ResolvedMethod};
use crate::baselines::{curriculum_weights, static_weights, BaselineMethod, MetaWeightState, metaweight_step};
use crate::data::{augment_class, stratified_kfold_indices, stratified_split_indices, Dataset, generate};
use crate::error::{FossilError, Result};
use crate::metrics::{confusion_metrics, effective_sample_size, predict, EpochRecord, MetricsReport, Trajectory, WeightSummary};
use crate::net::{self, AdamState, Batch, LossKind, MlpSpec};
use crate::seed::{derive_seed, tag};
use crate::weighting::{difficulty_scores, fossil_weights, DifficultyProxy, ProxyKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub tuned: bool,
    pub ir: f64,
    pub fold: usize,
    pub seed: u64,
    /// `None` for failed cells.
    pub metrics: Option<MetricsReport>,
    pub status: String,
    pub seconds: f64,
    #[serde(skip)]
    pub error: Option<String>,
}

impl RunResult {
    pub fn is_ok(&self) -> bool {
        self.metrics.is_some()
    }

    pub fn sort_key(&self) -> (&str, OrdF64, usize, u64) {
        (&self.method, OrdF64(self.ir), self.fold, self.seed)
    }
}

/// Total order on floats for sorting result keys.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTrajectory {
    pub method: String,
    pub ir: f64,
    pub fold: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub results: Vec<RunResult>,
    pub trajectories: Vec<CellTrajectory>,
}

impl ExperimentOutput {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Train and held-out rows for one (ir, fold, seed), standardized with the
/// statistics of the original training rows.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub ir: f64,
    pub fold: usize,
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
}

const DATA: u64 = 1;
const SPLIT: u64 = 2;
const INIT: u64 = 3;
const SHUFFLE: u64 = 4;
const AUGMENT: u64 = 5;
const META: u64 = 6;

/// Generates and splits the data for every (ir, seed), one entry per fold.
pub fn prepare_splits(cfg: &ExperimentConfig, ir: f64, seed: u64) -> Result<Vec<PreparedSplit>> {
    let ir_tag = ir.to_bits();
    let ds = generate(&cfg.gen_spec(ir, derive_seed(seed, &[DATA, ir_tag])))?;
    let split_seed = derive_seed(seed, &[SPLIT, ir_tag]);
    let pairs = if cfg.folds == 0 {
        vec![stratified_split_indices(&ds, cfg.data.test_fraction, split_seed)?]
    } else {
        stratified_kfold_indices(&ds, cfg.folds, split_seed)?
    };
    pairs
        .into_iter()
        .enumerate()
        .map(|(fold, (train_idx, test_idx))| {
            let mut train = ds.subset(&train_idx)?;
            let mut test = ds.subset(&test_idx)?;
            let (mean, sd) = column_stats(&train);
            if cfg.augmentation.enabled {
                let only = cfg.augmentation.minority_only.then_some(1u8);
                let aug_seed = derive_seed(seed, &[AUGMENT, ir_tag, fold as u64]);
                train = augment_class(&train, cfg.augmentation.copies, cfg.augmentation.jitter_sigma, aug_seed, only)?;
            }
            train = standardize(&train, &mean, &sd)?;
            test = standardize(&test, &mean, &sd)?;
            Ok(PreparedSplit { ir, fold, seed, train, test })
        })
        .collect()
}

fn column_stats(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = ds.n_features();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; d];
    for i in 0..ds.len() {
        for (m, x) in mean.iter_mut().zip(ds.row(i)) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..ds.len() {
        for ((v, x), m) in var.iter_mut().zip(ds.row(i)).zip(&mean) {
            *v += (x - m).powi(2) / n;
        }
    }
    let sd = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

fn standardize(ds: &Dataset, mean: &[f64], sd: &[f64]) -> Result<Dataset> {
    let d = ds.n_features();
    let features = ds
        .features()
        .iter()
        .enumerate()
        .map(|(k, x)| (x - mean[k % d]) / sd[k % d])
        .collect();
    Dataset::new(features, d, ds.labels().to_vec(), ds.aug_flags().to_vec(), ds.origin().to_vec())
}

fn class_priors(labels: &[u8]) -> Result<Vec<f64>> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(FossilError::InvalidInput("training split lacks a class".into()));
    }
    let n = labels.len() as f64;
    Ok(vec![(labels.len() - pos) as f64 / n, pos as f64 / n])
}

fn difficulty(spec: &MlpSpec, params: &[f64], train: &Batch, proxy: &DifficultyProxy) -> Result<Vec<f64>> {
    let probs = net::forward(spec, params, train.features())?;
    let losses = match proxy.kind {
        ProxyKind::Loss => Some(net::per_sample_losses(spec, params, train, LossKind::Bce)?),
        _ => None,
    };
    difficulty_scores(proxy, &probs, train.labels(), losses.as_deref())
}

fn gather(train: &Batch, idx: &[usize], weights: Vec<f64>) -> Result<Batch> {
    let d = train.n_features();
    let mut features = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        features.extend_from_slice(train.row(i));
    }
    Batch::new(
        features,
        d,
        idx.iter().map(|&i| train.labels()[i]).collect(),
        weights,
        idx.iter().map(|&i| train.aug_flags()[i]).collect(),
    )
}

/// Samples `size` training rows, half from each class, with replacement.
fn balanced_meta_batch(train: &Batch, by_class: &[Vec<usize>; 2], size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let idx: Vec<usize> = (0..size)
        .map(|k| {
            let pool = &by_class[k % 2];
            pool[rng.gen_range(0..pool.len())]
        })
        .collect();
    gather(train, &idx, vec![1.0; size])
}

/// Mean BCE and balanced error of `params` on `ds`.
pub fn evaluate(spec: &MlpSpec, params: &[f64], ds: &Batch) -> Result<(f64, f64, Vec<f64>)> {
    let probs = net::forward(spec, params, ds.features())?;
    let losses = net::per_sample_losses(spec, params, ds, LossKind::Bce)?;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let cm = confusion_metrics(&predict(&probs), ds.labels())?;
    Ok((loss, 1.0 - cm.balanced_accuracy, probs))
}

/// Trains one method on one split and scores it on the held-out rows.
pub fn train_cell(
    cfg: &ExperimentConfig,
    entry: &MethodEntry,
    split: &PreparedSplit,
) -> Result<(MetricsReport, Trajectory)> {
    let method = entry.resolve(cfg.epochs, cfg.proxy)?;
    let spec = MlpSpec::new(cfg.layer_sizes())?;
    let ir_tag = split.ir.to_bits();
    let fold = split.fold as u64;
    let mut params = net::init_params(&spec, derive_seed(split.seed, &[INIT, ir_tag, fold])).into_vec();
    let train = split.train.to_batch()?;
    let test = split.test.to_batch()?;
    let labels = train.labels().to_vec();
    let priors = class_priors(&labels)?;
    let n = train.len();

    let loss_kind = match &method {
        ResolvedMethod::Baseline { config, .. } => config.loss_kind(),
        ResolvedMethod::Fossil { .. } => LossKind::Bce,
    };
    let fossil_cfg = match &method {
        ResolvedMethod::Fossil { config, .. } => {
            let c = config.clone().with_priors(priors.clone());
            c.validate()?;
            Some(c)
        }
        _ => None,
    };
    let static_w = static_weights(&labels, &priors)?;
    let mut meta = match &method {
        ResolvedMethod::Baseline { config, .. } if config.method == BaselineMethod::Metaweight => {
            let seed = derive_seed(split.seed, &[META, tag(entry.label()), ir_tag, fold]);
            Some((
                MetaWeightState::new(config.metaweight_hidden, config.meta_lr, cfg.learning_rate, seed),
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])),
            ))
        }
        _ => None,
    };
    let mut by_class = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[usize::from(y)].push(i);
    }

    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut trajectory = Trajectory::new();
    let mut last_n_eff = n as f64;
    for epoch in 0..cfg.epochs {
        let base: Option<Vec<f64>> = match &method {
            ResolvedMethod::Fossil { proxy, .. } => {
                let d = difficulty(&spec, &params, &train, proxy)?;
                Some(fossil_weights(epoch, fossil_cfg.as_ref().unwrap(), &d, &labels, train.aug_flags())?)
            }
            ResolvedMethod::Baseline { config, proxy } => match config.method {
                BaselineMethod::Erm | BaselineMethod::Focal => Some(vec![1.0; n]),
                BaselineMethod::Static => Some(static_w.clone()),
                BaselineMethod::Metaweight => None,
                BaselineMethod::Curriculum => {
                    let d = difficulty(&spec, &params, &train, proxy)?;
                    Some(curriculum_weights(epoch, &d, config.curriculum_schedule, config.curriculum_min_temp, cfg.epochs))
                }
            },
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(split.seed, &[SHUFFLE, ir_tag, fold, epoch as u64])));
        let mut epoch_weights = Vec::with_capacity(n);
        for idx in order.chunks(cfg.batch_size) {
            let raw: Vec<f64> = match (&base, meta.as_mut()) {
                (Some(w), _) => idx.iter().map(|&i| w[i]).collect(),
                (None, Some((state, rng))) => {
                    let batch = gather(&train, idx, vec![1.0; idx.len()])?;
                    let val = balanced_meta_batch(&train, &by_class, cfg.meta_batch_size, rng)?;
                    metaweight_step(state, &spec, &params, &batch, &val)?.weights
                }
                (None, None) => unreachable!("only the weight net lacks epoch weights"),
            };
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            if !(mean > 0.0) || !mean.is_finite() {
                return Err(FossilError::NonFinite("batch weights"));
            }
            let b = idx.len() as f64;
            epoch_weights.extend(raw.iter().map(|w| w / mean));
            let batch = gather(&train, idx, raw.iter().map(|w| w / mean / b).collect())?;
            let (_, g) = net::loss_and_grad(&spec, &params, &batch, loss_kind)?;
            adam.update(&mut params, &g);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FossilError::NonFinite("parameters"));
        }

        let summary = WeightSummary::of(&epoch_weights)?;
        last_n_eff = effective_sample_size(&epoch_weights)?;
        let (val_loss, val_error, _) = evaluate(&spec, &params, &test)?;
        if !val_loss.is_finite() {
            return Err(FossilError::NonFinite("validation loss"));
        }
        trajectory.push(EpochRecord {
            epoch,
            val_balanced_error: val_error,
            val_loss,
            weights: summary,
            cg_residual: None,
        })?;
    }
    let (_, _, probs) = evaluate(&spec, &params, &test)?;
    let report = MetricsReport::evaluate(&probs, test.labels(), last_n_eff, &trajectory)?;
    Ok((report, trajectory))
}

fn run_cell(cfg: &ExperimentConfig, entry: &MethodEntry, split: &PreparedSplit) -> (RunResult, CellTrajectory) {
    let start = Instant::now();
    let outcome = train_cell(cfg, entry, split);
    let seconds = if cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let (metrics, trajectory, status, error) = match outcome {
        Ok((m, t)) => (Some(m), t, "ok".to_string(), None),
        Err(e) => (None, Trajectory::new(), "failed".to_string(), Some(e.to_string())),
    };
    let result = RunResult {
        method: entry.label().to_string(),
        tuned: entry.is_tuned(),
        ir: split.ir,
        fold: split.fold,
        seed: split.seed,
        metrics,
        status,
        seconds,
        error,
    };
    let traj = CellTrajectory {
        method: result.method.clone(),
        ir: split.ir,
        fold: split.fold,
        seed: split.seed,
        trajectory,
    };
    (result, traj)
}

/// Runs every (method, ir, fold, seed) cell. Cells run in parallel; each
/// draws only from seeds derived from its own key, so the sorted output does
/// not depend on scheduling. A failing cell yields a `failed` row.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let work = || -> Result<ExperimentOutput> {
        let data_jobs: Vec<(f64, u64)> = cfg
            .imbalance_ratios
            .iter()
            .flat_map(|&ir| cfg.seeds.iter().map(move |&s| (ir, s)))
            .collect();
        let splits: Vec<PreparedSplit> = data_jobs
            .par_iter()
            .map(|&(ir, seed)| prepare_splits(cfg, ir, seed))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let cells: Vec<(&MethodEntry, &PreparedSplit)> =
            cfg.methods.iter().flat_map(|m| splits.iter().map(move |s| (m, s))).collect();
        let mut outputs: Vec<(RunResult, CellTrajectory)> =
            cells.par_iter().map(|&(m, s)| run_cell(cfg, m, s)).collect();
        outputs.sort_by(|a, b| a.0.sort_key().cmp(&b.0.sort_key()));
        let (results, trajectories) = outputs.into_iter().unzip();
        Ok(ExperimentOutput { results, trajectories })
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| FossilError::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::MethodName;

    fn tiny(methods: Vec<MethodEntry>) -> ExperimentConfig {
        ExperimentConfig {
            epochs: 2,
            seeds: vec![42],
            imbalance_ratios: vec![4.0],
            methods,
            data: crate::harness::config::DataConfig { n_samples: 200, ..Default::default() },
            hidden_layers: vec![8],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn one_cell_shape() {
        let cfg = ExperimentConfig { epochs: 1, ..tiny(vec![MethodEntry::new(MethodName::Fossil)]) };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.trajectories[0].trajectory.len(), 1);
        assert!(out.results[0].is_ok());
    }

    #[test]
    fn every_method_runs_and_is_deterministic() {
        let methods = [
            MethodName::Fossil,
            MethodName::Erm,
            MethodName::Static,
            MethodName::Focal,
            MethodName::Metaweight,
            MethodName::Curriculum,
        ]
        .into_iter()
        .map(MethodEntry::new)
        .collect();
        let cfg = ExperimentConfig { folds: 3, ..tiny(methods) };
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.results.len(), 18);
        assert_eq!(a.failures(), 0, "{:?}", a.results.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>());
        let b = run_experiment(&ExperimentConfig { threads: Some(1), ..cfg }).unwrap();
        assert_eq!(a.results, b.results);
        let keys: Vec<_> = a.results.iter().map(|r| r.sort_key()).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn augmentation_adds_minority_rows_to_train_only() {
        let mut cfg = tiny(vec![MethodEntry::new(MethodName::Fossil)]);
        cfg.augmentation.enabled = true;
        let splits = prepare_splits(&cfg, 4.0, 42).unwrap();
        let s = &splits[0];
        let aug = s.train.aug_flags().iter().filter(|&&a| a).count();
        assert_eq!(aug, s.train.class_counts()[1] / 2);
        assert!(s.test.aug_flags().iter().all(|&a| !a));
        assert!(run_experiment(&cfg).unwrap().results[0].is_ok());
    }
}
