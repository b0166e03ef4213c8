//! Experiment configuration: TOML or JSON files layered over defaults, with
//! dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use relalign::backbone::{Activation, BackboneConfig};
use relalign::objectives::RecalibrationConfig;
use relalign::relation::AlignmentConfig;
use relalign::stream::StreamSpec;
use relalign::trainer::{LambdaSchedule, LrSchedule, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub total_classes: usize,
    pub tasks: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub cluster_separation: f64,
    pub within_class_std: f64,
    pub base_classes: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        let s = StreamSpec::default();
        Self {
            total_classes: s.total_classes,
            tasks: s.tasks,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            input_dim: s.input_dim,
            cluster_separation: s.cluster_separation,
            within_class_std: s.within_class_std,
            base_classes: s.base_classes,
        }
    }
}

/// Where task data comes from; the synthetic generator when both are unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `manifest.json` written by `export`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Labelled CSV split 80/20 per class; no base pretraining data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub width: usize,
    pub layers: usize,
    pub activation: Activation,
    pub rank: usize,
    pub adapter_targets: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            width: b.width,
            layers: b.layers,
            activation: b.activation,
            rank: b.rank,
            adapter_targets: b.adapter_targets,
            pretrain_epochs: b.pretrain_epochs,
            pretrain_lr: b.pretrain_lr,
            pretrain_batch: b.pretrain_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lambda: f64,
    pub lambda_schedule: LambdaSchedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            lr: t.lr,
            lr_schedule: t.lr_schedule,
            lambda: t.lambda,
            lambda_schedule: t.lambda_schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write `backbone.json` and `heads.json` after a run.
    pub checkpoints: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub weyl_cases: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self { weyl_cases: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub cases: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { cases: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Seeds averaged per strategy; empty uses the top-level seed.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: String,
    /// Drives data generation, initialization, batching and pseudo-features.
    pub seed: u64,
    pub stream: StreamSection,
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub train: TrainSection,
    pub alignment: AlignmentConfig,
    pub recalibration: RecalibrationConfig,
    pub output: OutputSection,
    pub theory: TheorySection,
    pub gradcheck: GradcheckSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "default".into(),
            seed: 0,
            stream: StreamSection::default(),
            data: DataSection::default(),
            backbone: BackboneSection::default(),
            train: TrainSection::default(),
            alignment: AlignmentConfig::default(),
            recalibration: RecalibrationConfig::default(),
            output: OutputSection::default(),
            theory: TheorySection::default(),
            gradcheck: GradcheckSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn stream_spec(&self) -> StreamSpec {
        let s = &self.stream;
        StreamSpec {
            total_classes: s.total_classes,
            tasks: s.tasks,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            input_dim: s.input_dim,
            cluster_separation: s.cluster_separation,
            within_class_std: s.within_class_std,
            base_classes: s.base_classes,
            seed: self.seed,
        }
    }

    pub fn backbone_config(&self, input_dim: usize) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            input_dim,
            width: b.width,
            layers: b.layers,
            activation: b.activation,
            rank: b.rank,
            adapter_targets: b.adapter_targets.clone(),
            pretrain_epochs: b.pretrain_epochs,
            pretrain_lr: b.pretrain_lr,
            pretrain_batch: b.pretrain_batch,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            lr: t.lr,
            lr_schedule: t.lr_schedule,
            lambda: t.lambda,
            lambda_schedule: t.lambda_schedule,
            alignment: self.alignment.clone(),
            recalibration: self.recalibration.clone(),
            seed: self.seed,
        }
    }

    /// Field-level checks that do not need the data.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.manifest.is_some() && self.data.csv.is_some() {
            return Err(CliError::Config(
                "data.manifest and data.csv are mutually exclusive".into(),
            ));
        }
        if self.data.manifest.is_none() {
            self.stream_spec().validate()?;
        }
        self.backbone_config(self.stream.input_dim).validate()?;
        self.train_config().validate(self.backbone.layers)?;
        Ok(())
    }
}

/// Global overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn parse_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // A run report is accepted too; its configuration echo is used.
        if let Some(cfg) = value.get_mut("config") {
            value = cfg.take();
        }
        toml::Table::try_from(value)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        text.parse::<toml::Table>()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(CliError::Config(format!("unknown config section `{key}`"))),
        };
    }
    if !cur.contains_key(*last) && *last != "manifest" && *last != "csv" {
        return Err(CliError::Config(format!("unknown config key `{key}`")));
    }
    let mut value = parse_value(raw.trim());
    // Integer literals are accepted where a real is expected.
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (cur.get(*last), &value) {
        value = toml::Value::Float(*i as f64);
    }
    cur.insert((*last).to_owned(), value);
    Ok(())
}

/// Defaults, then the optional file, then `--set`, `--seed` and `--out`.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut table = toml::Table::try_from(ExperimentConfig::default())
        .map_err(|e| CliError::Runtime(format!("default configuration does not serialize: {e}")))?;
    if let Some(p) = path {
        merge(&mut table, parse_file(p)?);
    }
    for s in &overrides.sets {
        apply_set(&mut table, s)?;
    }
    let mut cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}
