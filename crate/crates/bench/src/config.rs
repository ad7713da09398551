//! Experiment configuration files.
//!
//! Every random stream of a run derives from the master `seed`:
//!
//! | stream                  | key                                          |
//! |-------------------------|----------------------------------------------|
//! | synthetic series noise  | `derive_seed(seed, "data", "", "", 0)`       |
//! | model initialization    | `derive_seed(seed, "init", model, "", 0)`    |
//! | clean training shuffle  | `derive_seed(seed, "train", model, "", 0)`   |
//! | evaluation attacks      | `derive_seed(seed, "attack", "", attack, 0)` |
//! | adversarial training    | `derive_seed(seed, "defend", "", "", 0)`     |
//!
//! `derive_seed` hashes its arguments with FNV-1a and finishes with the
//! SplitMix64 mixer; the per-cell seeds of the defense and report stages are
//! derived from the keys above in the same way.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsadv_core::attack::{AttackConfig, AttackKind, DEFAULT_ITERATIONS};
use tsadv_core::data::{load_csv, make_windows, synth_series, CsvSchema, RawSeries, SynthKind, WindowedDataset};
use tsadv_core::defense::{AdvMode, Optimizer, TrainConfig};
use tsadv_core::metrics::EvalMode;
use tsadv_core::model::{Architecture, ModelSpec, Task};
use tsadv_core::rng::derive_seed;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default = "StageConfig::clean_default")]
    pub train: StageConfig,
    #[serde(default = "DefenseConfig::default")]
    pub defense: DefenseConfig,
    #[serde(default = "default_models")]
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub eval_mode: EvalMode,
    /// Also write `timeseries_overlay.svg` for the first model.
    #[serde(default)]
    pub overlay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Used in artifact file names.
    pub name: String,
    #[serde(default = "default_split")]
    pub split: f64,
    /// Inferred from the source when absent: classification when the series
    /// carries labels, regression otherwise.
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub synth: Option<SynthSource>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub kind: SynthKind,
    pub length: usize,
    #[serde(default)]
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub value_columns: Vec<String>,
    #[serde(default)]
    pub label_column: Option<String>,
}

impl CsvSource {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema { value_columns: self.value_columns.clone(), label_column: self.label_column.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
}

impl StageConfig {
    fn clean_default() -> Self {
        Self { epochs: 8, batch_size: 32, learning_rate: 0.003, optimizer: Optimizer::Adam }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default = "default_defense_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_defense_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_defense_optimizer")]
    pub optimizer: Optimizer,
    /// Inner maximization steps; 1 for FGSM and 5 otherwise when absent.
    #[serde(default)]
    pub inner_steps: Option<usize>,
    #[serde(default = "default_mode")]
    pub mode: AdvMode,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            epochs: default_defense_epochs(),
            batch_size: default_batch(),
            learning_rate: default_defense_lr(),
            optimizer: default_defense_optimizer(),
            inner_steps: None,
            mode: default_mode(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub architecture: Architecture,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub filters: Option<usize>,
    #[serde(default)]
    pub layers: Option<usize>,
    /// Clean-training overrides.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl ModelEntry {
    pub fn new(architecture: Architecture) -> Self {
        Self { architecture, hidden: None, filters: None, layers: None, epochs: None, learning_rate: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub kind: AttackKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub restarts: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl AttackEntry {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            iterations: default_iterations(),
            restarts: 0,
            init_scale: default_init_scale(),
        }
    }
}

fn default_split() -> f64 {
    0.8
}
fn default_batch() -> usize {
    32
}
fn default_defense_epochs() -> usize {
    6
}
fn default_defense_lr() -> f64 {
    0.03
}
fn default_defense_optimizer() -> Optimizer {
    Optimizer::Sgd
}
fn default_mode() -> AdvMode {
    AdvMode::MinMax
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.1
}
fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}
fn default_init_scale() -> f64 {
    1.0
}
fn default_models() -> Vec<ModelEntry> {
    Architecture::ALL.into_iter().map(ModelEntry::new).collect()
}
fn default_attacks() -> Vec<AttackEntry> {
    AttackKind::ALL.into_iter().map(AttackEntry::new).collect()
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    /// Parse and validate `path`. Relative CSV paths are resolved here.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            e => e,
        })?;
        if let Some(csv) = cfg.dataset.csv.as_mut() {
            if csv.path.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                csv.path = base.join(&csv.path);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.name.is_empty() || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(config_err(format!(
                "dataset name {:?} must be non-empty and use only letters, digits, '-', '_' and '.'",
                d.name
            )));
        }
        if !(d.split > 0.0 && d.split < 1.0) {
            return Err(config_err(format!("dataset.split must lie in (0, 1), got {}", d.split)));
        }
        match (&d.synth, &d.csv) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(config_err("dataset needs exactly one of [dataset.synth] and [dataset.csv]"))
            }
            (Some(s), None) if !(s.noise >= 0.0 && s.noise.is_finite()) => {
                return Err(config_err(format!("dataset.synth.noise must be finite and >= 0, got {}", s.noise)))
            }
            _ => {}
        }
        if self.models.is_empty() {
            return Err(config_err("no models configured"));
        }
        if self.attacks.is_empty() {
            return Err(config_err("no attacks configured"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].iter().any(|o| o.architecture == m.architecture) {
                return Err(config_err(format!("model {} listed twice", m.architecture)));
            }
            self.model_spec(m, 1, Task::Regression).validate().map_err(|e| config_err(e.to_string()))?;
            self.clean_config(m).validate().map_err(|e| config_err(format!("{}: {e}", m.architecture)))?;
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if self.attacks[..i].iter().any(|o| o.kind == a.kind) {
                return Err(config_err(format!("attack {} listed twice", a.kind)));
            }
            if !(0.0..=1.0).contains(&a.epsilon) {
                return Err(config_err(format!("{}: epsilon must lie in [0, 1], got {}", a.kind, a.epsilon)));
            }
            let attack = self.attack_config(a);
            attack.validate().map_err(|e| config_err(format!("{}: {e}", a.kind)))?;
            self.defense_base().with_adversary(attack).validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn architectures(&self) -> Vec<Architecture> {
        self.models.iter().map(|m| m.architecture).collect()
    }

    pub fn model_entry(&self, arch: Architecture) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.architecture == arch)
    }

    pub fn model_spec(&self, entry: &ModelEntry, channels: usize, task: Task) -> ModelSpec {
        let seed = derive_seed(self.seed, "init", entry.architecture.name(), "", 0);
        let mut spec = ModelSpec::new(entry.architecture, tsadv_core::data::PREDICTORS, channels, task, seed);
        if let Some(h) = entry.hidden {
            spec = spec.with_hidden(h);
        }
        if let Some(f) = entry.filters {
            spec = spec.with_filters(f);
        }
        if let Some(l) = entry.layers {
            spec = spec.with_layers(l);
        }
        spec
    }

    pub fn clean_config(&self, entry: &ModelEntry) -> TrainConfig {
        let t = &self.train;
        TrainConfig::new(
            entry.epochs.unwrap_or(t.epochs),
            t.batch_size,
            entry.learning_rate.unwrap_or(t.learning_rate),
            derive_seed(self.seed, "train", entry.architecture.name(), "", 0),
        )
        .with_optimizer(t.optimizer)
    }

    pub fn attack_config(&self, entry: &AttackEntry) -> AttackConfig {
        AttackConfig {
            kind: entry.kind,
            epsilon: entry.epsilon,
            alpha: entry.alpha,
            iterations: entry.iterations,
            restarts: entry.restarts,
            init_scale: entry.init_scale,
            seed: derive_seed(self.seed, "attack", "", entry.kind.name(), 0),
        }
    }

    pub fn attack_configs(&self) -> Vec<AttackConfig> {
        self.attacks.iter().map(|a| self.attack_config(a)).collect()
    }

    /// Adversarial training settings without an adversary; the defense
    /// stage fills in one attack per cell.
    pub fn defense_base(&self) -> TrainConfig {
        let d = &self.defense;
        let mut cfg =
            TrainConfig::new(d.epochs, d.batch_size, d.learning_rate, derive_seed(self.seed, "defend", "", "", 0))
                .with_optimizer(d.optimizer)
                .with_mode(d.mode);
        cfg.inner_steps = d.inner_steps;
        cfg
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data", "", "", 0)
    }

    /// The seeds and settings recorded in the report.
    pub fn fingerprint_parts(&self) -> (BTreeMap<String, u64>, BTreeMap<String, String>) {
        let mut seeds = BTreeMap::new();
        seeds.insert("master".to_string(), self.seed);
        seeds.insert("data".to_string(), self.data_seed());
        seeds.insert("defend".to_string(), self.defense_base().seed);
        for m in &self.models {
            let name = m.architecture.name();
            seeds.insert(format!("init/{name}"), derive_seed(self.seed, "init", name, "", 0));
            seeds.insert(format!("train/{name}"), self.clean_config(m).seed);
        }
        for a in &self.attacks {
            seeds.insert(format!("attack/{}", a.kind), self.attack_config(a).seed);
        }
        let mut settings = BTreeMap::new();
        settings.insert("dataset".to_string(), serde_json::to_string(&self.dataset).expect("serializable"));
        settings.insert("train".to_string(), serde_json::to_string(&self.train).expect("serializable"));
        settings.insert("defense".to_string(), serde_json::to_string(&self.defense).expect("serializable"));
        settings.insert("models".to_string(), serde_json::to_string(&self.models).expect("serializable"));
        (seeds, settings)
    }

    /// Read or generate the raw series.
    pub fn load_series(&self) -> Result<RawSeries, CliError> {
        let d = &self.dataset;
        let mut series = match (&d.synth, &d.csv) {
            (Some(s), _) => synth_series(s.kind, s.length, s.noise, self.data_seed())?,
            (None, Some(c)) => load_csv(&c.path, &c.schema())?,
            (None, None) => unreachable!("validated"),
        };
        series.name = d.name.clone();
        Ok(series)
    }

    pub fn task_for(&self, series: &RawSeries) -> Task {
        self.dataset.task.unwrap_or(if series.labels.is_some() { Task::Classification } else { Task::Regression })
    }

    /// Identity of the windowed dataset, stored in the cache file.
    pub fn dataset_key(&self) -> String {
        format!("{}|seed={}", serde_json::to_string(&self.dataset).expect("serializable"), self.seed)
    }

    pub fn build_dataset(&self) -> Result<(WindowedDataset, WindowedDataset), CliError> {
        let series = self.load_series()?;
        let task = self.task_for(&series);
        Ok(make_windows(&series, self.dataset.split, task)?)
    }
}
