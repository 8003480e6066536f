//! Strict TOML experiment configuration. Every section and field is optional;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::{InitStrategy, PoolKind};
use crate::data::{default_ratios, LatentTaskSpec, ModalitySpec, SplitMode};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::probing::ProbeConfig;
use crate::transfer::{AlignLoss, BaselineConfig, BridgeTrainConfig, SelectionCriterion};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub pretrain: PretrainConfig,
    pub bridge: BridgeConfig,
    pub probe: ProbeSection,
    pub baseline: BaselineSection,
    pub experiment: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load a saved dataset instead of generating one.
    pub file: Option<PathBuf>,
    pub seed: u64,
    pub classes: usize,
    pub latent_dim: usize,
    pub separation: f64,
    pub class_std: f64,
    pub noise_level: f64,
    pub subject_shift: f64,
    pub samples_per_subject: usize,
    pub subjects: usize,
    pub split_mode: SplitMode,
    /// old, new, val, pair; normalized when they do not sum to 1.
    pub ratios: [f64; 4],
    pub old_modality: ModalitySpec,
    pub new_modality: ModalitySpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let t = LatentTaskSpec::default();
        Self {
            file: None,
            seed: 0,
            classes: t.classes,
            latent_dim: t.latent_dim,
            separation: 2.0,
            class_std: 0.5,
            noise_level: t.noise_level,
            subject_shift: t.subject_shift,
            samples_per_subject: t.samples_per_subject,
            subjects: t.subjects,
            split_mode: SplitMode::Subject,
            ratios: default_ratios(),
            old_modality: ModalitySpec::default_old(),
            new_modality: ModalitySpec::default_new(),
        }
    }
}

impl DataConfig {
    pub fn task_spec(&self) -> LatentTaskSpec {
        let mut t = LatentTaskSpec::with_classes(self.classes, self.latent_dim, self.separation, self.class_std);
        t.noise_level = self.noise_level;
        t.subject_shift = self.subject_shift;
        t.samples_per_subject = self.samples_per_subject;
        t.subjects = self.subjects;
        t
    }

    pub fn normalized_ratios(&self) -> Result<[f64; 4]> {
        let sum: f64 = self.ratios.iter().sum();
        if !(sum > 0.0) || self.ratios.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Config(format!("split ratios {:?} must be >= 0 with a positive sum", self.ratios)));
        }
        Ok(self.ratios.map(|r| r / sum))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub old_arch: Architecture,
    pub new_arch: Architecture,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            old_arch: Architecture::Conv,
            new_arch: Architecture::ConvWide,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    /// Size of the unlabeled corpus the new-modality encoder is pretrained on.
    pub foundation_subjects: usize,
    pub foundation_epochs: usize,
    pub foundation_lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            teacher_epochs: 20,
            teacher_lr: 3e-3,
            foundation_subjects: 6,
            foundation_epochs: 20,
            foundation_lr: 3e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub rank: usize,
    pub prototypes: usize,
    pub pool: PoolKind,
    pub init: InitStrategy,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: AlignLoss,
    pub pooled_cosine: bool,
    pub align_layer: Option<usize>,
    /// Which old layer stage 2 picks: the most (`max`) or least (`min`) similar.
    pub criterion: SelectionCriterion,
    /// Fixed positions skip the corresponding selection stage.
    pub input_position: Option<usize>,
    pub output_position: Option<usize>,
    /// When both lists are non-empty, (rank, prototypes) is chosen on D_val.
    pub grid_ranks: Vec<usize>,
    pub grid_prototypes: Vec<usize>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        let t = BridgeTrainConfig::default();
        Self {
            rank: 4,
            prototypes: 8,
            pool: PoolKind::Mean,
            init: InitStrategy::PrototypeFromOld,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            loss: t.loss,
            pooled_cosine: t.pooled_cosine,
            align_layer: None,
            criterion: SelectionCriterion::Max,
            input_position: None,
            output_position: None,
            grid_ranks: Vec::new(),
            grid_prototypes: Vec::new(),
        }
    }
}

impl BridgeConfig {
    pub fn train_config(&self, seed: u64) -> BridgeTrainConfig {
        BridgeTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            loss: self.loss,
            pooled_cosine: self.pooled_cosine,
            align_layer: self.align_layer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub l2: f64,
    pub folds: usize,
    pub max_iter: usize,
    /// Rows kept for CKA.
    pub row_cap: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            l2: p.l2,
            folds: p.folds,
            max_iter: p.max_iter,
            row_cap: crate::cka::DEFAULT_ROW_CAP,
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            l2: self.l2,
            folds: self.folds,
            max_iter: self.max_iter,
            seed,
            ..ProbeConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub temperature: f64,
    pub kd_temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let b = BaselineConfig::default();
        Self {
            temperature: b.temperature,
            kd_temperature: b.kd_temperature,
            lr: b.lr,
            epochs: 30,
            batch_size: b.batch_size,
        }
    }
}

impl BaselineSection {
    pub fn baseline_config(&self, seed: u64) -> BaselineConfig {
        BaselineConfig {
            temperature: self.temperature,
            kd_temperature: self.kd_temperature,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Method identifiers accepted in `experiment.methods`.
pub const METHODS: [&str; 5] = ["oracle", "bridge", "kd", "kd-contrast", "random"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub methods: Vec<String>,
    pub seeds: usize,
    pub base_seed: u64,
    pub pair_fraction: f64,
    pub out: Option<PathBuf>,
    /// Pair fractions for the pair-size ablation.
    pub pair_fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: METHODS.iter().map(|s| s.to_string()).collect(),
            seeds: 5,
            base_seed: 0,
            pair_fraction: 1.0,
            out: None,
            pair_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.normalized_ratios()?;
        self.data.task_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.data.old_modality.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.data.new_modality.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.experiment.seeds == 0 {
            return bad("experiment.seeds must be >= 1".into());
        }
        if self.experiment.methods.is_empty() {
            return bad("experiment.methods is empty".into());
        }
        for m in &self.experiment.methods {
            if !METHODS.contains(&m.as_str()) {
                return bad(format!("unknown method `{m}` (expected one of {METHODS:?})"));
            }
        }
        let f = self.experiment.pair_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("experiment.pair_fraction {f} outside (0, 1]"));
        }
        if self.experiment.pair_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("experiment.pair_fractions entries must lie in (0, 1]".into());
        }
        if self.bridge.rank == 0 || self.bridge.prototypes == 0 {
            return bad("bridge.rank and bridge.prototypes must be >= 1".into());
        }
        if self.bridge.batch_size == 0 || self.pretrain.batch_size == 0 || self.baseline.batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.baseline.temperature > 0.0) || !(self.baseline.kd_temperature > 0.0) {
            return bad("baseline temperatures must be > 0".into());
        }
        if self.probe.folds < 2 || self.probe.row_cap < 2 {
            return bad("probe.folds and probe.row_cap must be >= 2".into());
        }
        if self.pretrain.foundation_subjects == 0 {
            return bad("pretrain.foundation_subjects must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_toml("[bridge]\nrnak = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(ExperimentConfig::from_toml("[nope]\n").is_err());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = ExperimentConfig::default();
        c.bridge.grid_ranks = vec![2, 4];
        c.experiment.methods = vec!["bridge".into()];
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml("[experiment]\nseeds = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nmethods = [\"magic\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("[baseline]\ntemperature = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nclass_std = 0.0\n").is_err());
    }
}
