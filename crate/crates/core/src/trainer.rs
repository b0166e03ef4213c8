//! Per-task optimization with dual forwards and alignment, the outer task
//! loop, trade-off schedules and optimizer state.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_base, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::metrics::{forgetting, summarize, AccuracyMatrix, Summary};
use crate::numerics::{norm, streams, Rng};
use crate::objectives::{
    fit_class_stats, recalibrate_classifier, total_loss, ClassStats, LossBreakdown,
    RecalibrationConfig,
};
use crate::relation::{relation_drift, relation_matrix, AlignmentConfig, RelationMatrix};
use crate::stream::{Sample, Stream, TaskData};

/// Size cap of the per-task probe batch used for drift tracking.
pub const PROBE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    #[default]
    Constant,
    Cosine,
    Exponential,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lambda: f64,
    pub lambda_schedule: LambdaSchedule,
    pub alignment: AlignmentConfig,
    pub recalibration: RecalibrationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 5e-3,
            lr_schedule: LrSchedule::Cosine,
            lambda: 1.0,
            lambda_schedule: LambdaSchedule::Constant,
            alignment: AlignmentConfig::default(),
            recalibration: RecalibrationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("train.lambda must be non-negative"));
        }
        self.alignment.validate(layers)?;
        self.recalibration.validate()
    }
}

/// Trade-off coefficient at `epoch` (0-based) of `total`.
pub fn lambda_at(schedule: LambdaSchedule, base: f64, epoch: usize, total: usize) -> Result<f64> {
    if total < 1 {
        return Err(Error::contract("lambda schedule needs at least one epoch"));
    }
    if epoch >= total {
        return Err(Error::contract(format!("epoch {epoch} outside 0..{total}")));
    }
    if total == 1 {
        return Ok(base);
    }
    let x = epoch as f64 / (total - 1) as f64;
    Ok(match schedule {
        LambdaSchedule::Constant => base,
        LambdaSchedule::Cosine => base * 0.5 * (1.0 + (PI * x).cos()),
        LambdaSchedule::Exponential => base * (-4.0 * x).exp2(),
        LambdaSchedule::Linear => base * (1.0 - x),
    })
}

/// Learning rate at optimizer `step` (0-based) of `total` steps in a task.
pub fn lr_at(schedule: LrSchedule, base: f64, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine if total > 0 => {
            base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
        }
        LrSchedule::Cosine => base,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, params: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam {
            params
        } else {
            0
        };
        Self {
            kind,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != grad.len()
            || (self.kind == OptimizerKind::Adam && self.m.len() != grad.len())
        {
            return Err(Error::contract(
                "optimizer state does not match the parameter layout",
            ));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
                let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub probe_relation_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub probe_task: usize,
    pub model_task: usize,
    pub sample_count: usize,
    pub mean_relation_drift: f64,
    pub mean_feature_drift: f64,
}

pub fn probe_batch(task: &TaskData) -> &[Sample] {
    &task.train[..task.train.len().min(PROBE_SIZE)]
}

fn probe_relations(
    backbone: &Backbone,
    probe: &[Sample],
    horizon: usize,
    align: &AlignmentConfig,
) -> Result<Vec<RelationMatrix>> {
    let weights = backbone.effective_weights(horizon)?;
    let layers = align.layers(backbone.layers());
    probe
        .iter()
        .map(|s| {
            relation_matrix(
                &backbone.forward_with(&weights, &s.x, &[], horizon)?,
                align.phi,
                &layers,
            )
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains task `t`: adds the task's adapter, then optimizes it
/// together with the heads of the task's classes.
pub fn train_task(
    backbone: &mut Backbone,
    task: &TaskData,
    cfg: &TrainConfig,
    t: usize,
) -> Result<TaskLog> {
    cfg.validate(backbone.layers())?;
    let mut init = Rng::new(cfg.seed, streams::INIT).derive(&format!("adapter/{t}"));
    backbone.add_task_adapter(t, &mut init)?;
    backbone.ensure_heads(&task.labels);
    let classes = task.labels.clone();
    let n = task.train.len();
    let mut log = TaskLog {
        task: t,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    if cfg.epochs == 0 || n == 0 {
        return Ok(log);
    }
    let probe = probe_batch(task);
    let probe_prev = probe_relations(backbone, probe, t - 1, &cfg.alignment)?;

    let mut opt = OptimizerState::new(cfg.optimizer, backbone.trainable_count(&classes));
    let mut rng = Rng::new(cfg.seed, streams::BATCH).derive(&format!("task/{t}"));
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lambda = lambda_at(cfg.lambda_schedule, cfg.lambda, epoch, cfg.epochs)?;
        rng.shuffle(&mut order);
        let (mut ce, mut align, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
            let out = total_loss(backbone, &batch, &classes, &cfg.alignment, lambda, true)
                .map_err(|e| match e {
                    Error::Numerical { stage, detail } => Error::Numerical {
                        stage: format!("task {t} step {step}: {stage}"),
                        detail,
                    },
                    other => other,
                })?;
            let w = batch.len() as f64;
            ce += w * out.breakdown.ce;
            align += w * out.breakdown.align;
            correct += out.correct;
            let mut params = backbone.trainable_params(&classes)?;
            let lr = lr_at(cfg.lr_schedule, cfg.lr, step, total_steps);
            opt.update(&mut params, &out.gradient.expect("requested"), lr)?;
            if let Some(i) = params.iter().position(|p| !p.is_finite()) {
                return Err(Error::numerical(
                    format!("task {t} step {step} ({} strategy)", cfg.alignment.strategy),
                    format!("parameter {i} became non-finite"),
                ));
            }
            backbone.set_trainable_params(&classes, &params)?;
            step += 1;
        }
        let probe_cur = probe_relations(backbone, probe, t, &cfg.alignment)?;
        let drift = mean(
            probe_prev
                .iter()
                .zip(&probe_cur)
                .map(|(a, b)| relation_drift(b, a))
                .collect::<Result<Vec<f64>>>()?
                .into_iter(),
        );
        let nf = n as f64;
        log.epochs.push(EpochLog {
            epoch,
            lambda,
            loss: LossBreakdown::new(ce / nf, align / nf, lambda),
            train_accuracy: correct as f64 / nf,
            probe_relation_drift: drift,
        });
    }
    Ok(log)
}

/// Features `zᴸ` at `horizon` grouped by class, fitted to Gaussian statistics.
pub fn class_statistics(
    backbone: &Backbone,
    samples: &[Sample],
    horizon: usize,
    shrinkage: f64,
) -> Result<BTreeMap<usize, ClassStats>> {
    let weights = backbone.effective_weights(horizon)?;
    let mut grouped: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for s in samples {
        let tr = backbone.forward_with(&weights, &s.x, &[], horizon)?;
        grouped.entry(s.y).or_default().push(tr.last().to_vec());
    }
    grouped
        .into_iter()
        .map(|(c, f)| Ok((c, fit_class_stats(c, &f, shrinkage)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub accuracy: AccuracyMatrix,
    pub summary: Summary,
    /// `ℱ_t` for `t = 1..=T`; `None` for `t = 1`.
    pub forgetting: Vec<Option<f64>>,
    pub logs: Vec<TaskLog>,
    pub drift: Vec<DriftRecord>,
    pub seed: u64,
}

impl RunReport {
    pub fn final_forgetting(&self) -> Option<f64> {
        self.forgetting.last().copied().flatten()
    }

    /// Mean relation drift of task `s` probes under the final model.
    pub fn final_drift(&self, probe_task: usize) -> Option<&DriftRecord> {
        let last = self.accuracy.tasks();
        self.drift
            .iter()
            .find(|d| d.probe_task == probe_task && d.model_task == last)
    }
}

/// Everything produced by a run: the report, the final backbone and the head
/// snapshot taken after each task.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub backbone: Backbone,
    pub heads: Vec<BTreeMap<usize, Vec<f64>>>,
}

struct Probe {
    relations: Vec<RelationMatrix>,
    features: Vec<Vec<f64>>,
}

fn probe_state(
    backbone: &Backbone,
    probe: &[Sample],
    horizon: usize,
    align: &AlignmentConfig,
) -> Result<Probe> {
    let weights = backbone.effective_weights(horizon)?;
    let layers = align.layers(backbone.layers());
    let mut relations = Vec::with_capacity(probe.len());
    let mut features = Vec::with_capacity(probe.len());
    for s in probe {
        let tr = backbone.forward_with(&weights, &s.x, &[], horizon)?;
        relations.push(relation_matrix(&tr, align.phi, &layers)?);
        features.push(tr.last().to_vec());
    }
    Ok(Probe {
        relations,
        features,
    })
}

/// Pretrains the base on the stream's base split, then trains, recalibrates and
/// evaluates task by task.
pub fn run_stream(
    stream: &Stream,
    backbone_cfg: &BackboneConfig,
    cfg: &TrainConfig,
) -> Result<RunOutcome> {
    stream.check_disjoint()?;
    if let Some(dim) = stream.input_dim() {
        if dim != backbone_cfg.input_dim {
            return Err(Error::config(format!(
                "stream input_dim {dim} differs from backbone.input_dim {}",
                backbone_cfg.input_dim
            )));
        }
    }
    backbone_cfg.validate()?;
    cfg.validate(backbone_cfg.layers)?;
    let mut backbone = pretrain_base(
        backbone_cfg,
        &stream.base,
        &stream.stream_labels(),
        cfg.seed,
    )?;

    let mut accuracy = AccuracyMatrix::empty();
    let mut logs = Vec::new();
    let mut drift = Vec::new();
    let mut heads = Vec::new();
    let mut stats: BTreeMap<usize, ClassStats> = BTreeMap::new();
    let mut probes: Vec<Probe> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();

    for (i, task) in stream.tasks.iter().enumerate() {
        let t = i + 1;
        logs.push(train_task(&mut backbone, task, cfg, t)?);
        seen.extend_from_slice(&task.labels);
        seen.sort_unstable();

        stats.extend(class_statistics(
            &backbone,
            &task.train,
            t,
            cfg.recalibration.shrinkage,
        )?);
        if cfg.recalibration.enabled {
            let mut rng = Rng::new(cfg.seed, streams::PSEUDO).derive(&format!("task/{t}"));
            let new_heads =
                recalibrate_classifier(&backbone, &stats, &seen, &cfg.recalibration, &mut rng)?;
            backbone.replace_heads(new_heads);
        }
        heads.push(backbone.heads().clone());

        let row = stream.tasks[..t]
            .iter()
            .map(|s| backbone.accuracy(&s.test, t, &seen))
            .collect::<Result<Vec<f64>>>()?;
        accuracy.push_row(row)?;

        probes.push(probe_state(
            &backbone,
            probe_batch(task),
            t,
            &cfg.alignment,
        )?);
        for (si, past) in probes.iter().enumerate() {
            let now = probe_state(&backbone, probe_batch(&stream.tasks[si]), t, &cfg.alignment)?;
            let rel = now
                .relations
                .iter()
                .zip(&past.relations)
                .map(|(a, b)| relation_drift(a, b))
                .collect::<Result<Vec<f64>>>()?;
            let feat = now
                .features
                .iter()
                .zip(&past.features)
                .map(|(a, b)| norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>()));
            drift.push(DriftRecord {
                probe_task: si + 1,
                model_task: t,
                sample_count: rel.len(),
                mean_relation_drift: mean(rel.into_iter()),
                mean_feature_drift: mean(feat),
            });
        }
    }

    let summary = summarize(&accuracy)?;
    let forgetting = forgetting(&accuracy.errors())?;
    Ok(RunOutcome {
        report: RunReport {
            accuracy,
            summary,
            forgetting,
            logs,
            drift,
            seed: cfg.seed,
        },
        backbone,
        heads,
    })
}
