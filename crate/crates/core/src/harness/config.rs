use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineMethod};
use crate::error::{FossilError, Result};
use crate::weighting::{DifficultyProxy, FossilConfig};

pub const DEFAULT_SEEDS: [u64; 8] = [42, 77, 123, 999, 2025, 17, 88, 321];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Fossil,
    Erm,
    Static,
    Focal,
    Metaweight,
    Curriculum,
}

impl MethodName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Fossil => "fossil",
            MethodName::Erm => "erm",
            MethodName::Static => "static",
            MethodName::Focal => "focal",
            MethodName::Metaweight => "metaweight",
            MethodName::Curriculum => "curriculum",
        }
    }

    fn baseline(&self) -> Option<BaselineMethod> {
        match self {
            MethodName::Fossil => None,
            MethodName::Erm => Some(BaselineMethod::Erm),
            MethodName::Static => Some(BaselineMethod::Static),
            MethodName::Focal => Some(BaselineMethod::Focal),
            MethodName::Metaweight => Some(BaselineMethod::Metaweight),
            MethodName::Curriculum => Some(BaselineMethod::Curriculum),
        }
    }
}

/// One method column of an experiment. `label` names the rows in the output
/// (defaults to the method name) so several variants of one method can run
/// side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: MethodName,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default = "yes")]
    pub tuned: bool,
    /// Replaces the default or tuned closed-form settings.
    #[serde(default)]
    pub fossil: Option<FossilConfig>,
    /// Replaces the default or tuned baseline settings.
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    /// Overrides the experiment-wide difficulty proxy.
    #[serde(default)]
    pub proxy: Option<DifficultyProxy>,
}

fn yes() -> bool {
    true
}

impl MethodEntry {
    pub fn new(method: MethodName) -> Self {
        Self {
            method,
            label: None,
            tuned: true,
            fossil: None,
            baseline: None,
            proxy: None,
        }
    }

    pub fn untuned(mut self) -> Self {
        self.tuned = false;
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn with_proxy(mut self, proxy: DifficultyProxy) -> Self {
        self.proxy = Some(proxy);
        self
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.method.as_str())
    }

    /// Whether the result rows should carry the tuned flag; untunable
    /// methods never do.
    pub fn is_tuned(&self) -> bool {
        self.tuned && self.method.baseline().is_none_or(|b| b.tunable())
    }

    pub fn resolve(&self, epochs: usize, default_proxy: DifficultyProxy) -> Result<ResolvedMethod> {
        let proxy = self.proxy.unwrap_or(default_proxy);
        match self.method.baseline() {
            None => {
                let mut cfg = self.fossil.clone().unwrap_or_else(|| {
                    if self.tuned {
                        FossilConfig::tuned()
                    } else {
                        FossilConfig::default()
                    }
                });
                cfg.total_epochs = epochs;
                // priors are re-estimated per cell; validate the rest now
                cfg.clone().with_priors(vec![0.5, 0.5]).validate()?;
                Ok(ResolvedMethod::Fossil { config: cfg, proxy })
            }
            Some(b) => {
                let cfg = self.baseline.clone().unwrap_or_else(|| {
                    if self.tuned {
                        BaselineConfig::tuned_for(b)
                    } else {
                        BaselineConfig::default_for(b)
                    }
                });
                if cfg.method != b {
                    return Err(FossilError::InvalidConfig(format!(
                        "baseline settings for {} name method {}",
                        self.label(),
                        cfg.method.name()
                    )));
                }
                cfg.validate()?;
                Ok(ResolvedMethod::Baseline { config: cfg, proxy })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResolvedMethod {
    Fossil { config: FossilConfig, proxy: DifficultyProxy },
    Baseline { config: BaselineConfig, proxy: DifficultyProxy },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub copies: usize,
    pub jitter_sigma: f64,
    /// Augment only the minority (label 1) class.
    pub minority_only: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            copies: 1,
            jitter_sigma: 0.5,
            minority_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
    pub n_informative: usize,
    pub n_redundant: usize,
    pub clusters_per_class: usize,
    pub flip_y: f64,
    pub class_sep: f64,
    /// Held-out fraction when `folds` is 0.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            n_informative: 10,
            n_redundant: 5,
            clusters_per_class: 2,
            flip_y: 0.05,
            class_sep: 1.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    /// 0 runs one stratified holdout split; `k >= 2` runs every fold of a
    /// stratified k-fold split.
    pub folds: usize,
    pub imbalance_ratios: Vec<f64>,
    pub hidden_layers: Vec<usize>,
    pub methods: Vec<MethodEntry>,
    pub proxy: DifficultyProxy,
    pub augmentation: AugmentConfig,
    pub data: DataConfig,
    /// Rows per meta batch for the learned weight net.
    pub meta_batch_size: usize,
    pub output_dir: PathBuf,
    /// Write wall-clock seconds to the results; off by default so reruns are
    /// byte-identical.
    pub record_timing: bool,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seeds: DEFAULT_SEEDS.to_vec(),
            folds: 0,
            imbalance_ratios: vec![4.0, 9.0, 19.0],
            hidden_layers: vec![64, 64],
            methods: [
                MethodName::Fossil,
                MethodName::Erm,
                MethodName::Static,
                MethodName::Focal,
                MethodName::Metaweight,
                MethodName::Curriculum,
            ]
            .into_iter()
            .map(MethodEntry::new)
            .collect(),
            proxy: DifficultyProxy::default(),
            augmentation: AugmentConfig::default(),
            data: DataConfig::default(),
            meta_batch_size: 32,
            output_dir: PathBuf::from("results"),
            record_timing: false,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FossilError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.methods.is_empty() {
            return bad("methods must be nonempty".into());
        }
        if self.imbalance_ratios.is_empty() || self.imbalance_ratios.iter().any(|&r| !(r > 1.0) || !r.is_finite()) {
            return bad("imbalance ratios must be finite and greater than 1".into());
        }
        if self.batch_size == 0 || self.meta_batch_size < 2 {
            return bad("batch sizes must be positive (meta batch at least 2)".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.folds == 1 {
            return bad("folds must be 0 (single split) or at least 2".into());
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)".into());
        }
        if !(self.augmentation.jitter_sigma >= 0.0) {
            return bad("augmentation jitter must be nonnegative".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        let mut labels = BTreeSet::new();
        for m in &self.methods {
            if !labels.insert(m.label().to_string()) {
                return bad(format!("duplicate method label {}", m.label()));
            }
            if m.label().contains([',', '"', '\n']) {
                return bad(format!("method label {:?} must not contain commas or quotes", m.label()));
            }
            m.resolve(self.epochs, self.proxy)?;
        }
        self.gen_spec(self.imbalance_ratios[0], 0).validate()
    }

    /// Generator settings for one imbalance ratio.
    pub fn gen_spec(&self, ir: f64, seed: u64) -> crate::data::GenSpec {
        crate::data::GenSpec {
            n_samples: self.data.n_samples,
            n_features: self.input_dim(),
            n_informative: self.data.n_informative,
            n_redundant: self.data.n_redundant,
            clusters_per_class: self.data.clusters_per_class,
            flip_y: self.data.flip_y,
            class_sep: self.data.class_sep,
            majority_prior: crate::data::GenSpec::prior_for_ir(ir),
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        20
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden_layers);
        sizes.push(1);
        sizes
    }

    pub fn n_cells(&self) -> usize {
        self.methods.len() * self.imbalance_ratios.len() * self.seeds.len() * self.folds.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.learning_rate), (50, 64, 1e-3));
        assert_eq!(cfg.seeds, vec![42, 77, 123, 999, 2025, 17, 88, 321]);
        assert_eq!(cfg.n_cells(), 144);
        assert_eq!(cfg.layer_sizes(), vec![20, 64, 64, 1]);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_json(r#"{"epochs": 3, "methods": [{"method": "erm"}, {"method": "fossil", "label": "fossil_loss", "proxy": {"kind": "loss"}}]}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.methods[1].label(), "fossil_loss");
        assert!(!partial.methods[0].is_tuned());
        assert!(partial.methods[1].is_tuned());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            r#"{"epochs": 0}"#,
            r#"{"seeds": []}"#,
            r#"{"folds": 1}"#,
            r#"{"imbalance_ratios": [0.5]}"#,
            r#"{"methods": [{"method": "erm"}, {"method": "erm"}]}"#,
            r#"{"methods": [{"method": "nope"}]}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"methods": [{"method": "focal", "baseline": {"method": "erm", "focal_gamma": 2.0, "focal_alpha": null, "metaweight_hidden": 4, "meta_lr": 0.1, "curriculum_schedule": "linear", "curriculum_min_temp": 0.1, "tuned": false}}]}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn fossil_entries_pick_tuned_or_default() {
        let tuned = MethodEntry::new(MethodName::Fossil).resolve(20, DifficultyProxy::default()).unwrap();
        let ResolvedMethod::Fossil { config, .. } = tuned else { panic!() };
        assert_eq!((config.class_clamp, config.total_epochs), (12.0, 20));
        let plain = MethodEntry::new(MethodName::Fossil).untuned().resolve(20, DifficultyProxy::default()).unwrap();
        let ResolvedMethod::Fossil { config, .. } = plain else { panic!() };
        assert!(config.class_clamp.is_infinite());
    }
}
