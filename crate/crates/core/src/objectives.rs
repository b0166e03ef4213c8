//! Cross-entropy, the alignment dispatcher, the total training objective and
//! classifier recalibration on Gaussian pseudo-features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{ActivationTrace, Backbone, LayerGrads};
use crate::error::{Error, Result};
use crate::numerics::{cholesky, GradRecord, Matrix, Objective, Rng};
use crate::relation::{
    batch_eigen_loss, huber, huber_grad, normalize, normalize_backward, p2p_loss,
    relation_backward, relation_matrix, sv_align_loss, AlignmentConfig, RelationMatrix, Strategy,
};
use crate::stream::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub align: f64,
    pub total: f64,
    pub lambda_effective: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, align: f64, lambda: f64) -> Self {
        Self {
            ce,
            align,
            total: ce + lambda * align,
            lambda_effective: lambda,
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(logits)[label]`, where `label` indexes `logits`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label index {label} outside {} logits",
            logits.len()
        )));
    }
    let (top, m) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, l)| (l - m).exp())
        .sum();
    Ok((m - logits[label]) + rest.ln_1p())
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let value = cross_entropy(logits, label)?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok((value, g))
}

/// Mean cross-entropy over `(logits, label index)` pairs.
pub fn batch_cross_entropy(items: &[(Vec<f64>, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("cross-entropy over an empty batch"));
    }
    let sum = items
        .iter()
        .map(|(l, y)| cross_entropy(l, *y))
        .sum::<Result<f64>>()?;
    Ok(sum / items.len() as f64)
}

fn layer_target(z: &[f64], normalize_features: bool) -> (Vec<f64>, f64) {
    if normalize_features {
        normalize(z)
    } else {
        (z.to_vec(), 1.0)
    }
}

/// Mean over `layers` of `ρ(‖ẑ_prev − ẑ_cur‖² / d)` with gradients with respect
/// to each selected `z_cur`.
pub fn feature_distill_term(
    prev: &ActivationTrace,
    cur: &ActivationTrace,
    layers: &[usize],
    normalize_features: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if layers.is_empty() {
        return Err(Error::contract(
            "feature distillation needs at least one layer",
        ));
    }
    let total = cur.layers();
    if prev.layers() != total {
        return Err(Error::contract("traces come from different depths"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > total) {
        return Err(Error::contract(format!("layer {bad} outside 1..={total}")));
    }
    let count = layers.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    for &l in layers {
        let zc = cur.state(l);
        let d = zc.len() as f64;
        let (up, _) = layer_target(prev.state(l), normalize_features);
        let (uc, n) = layer_target(zc, normalize_features);
        let q: f64 = up
            .iter()
            .zip(&uc)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d;
        value += huber(q);
        let coeff = huber_grad(q) * 2.0 / (d * count);
        let du: Vec<f64> = uc.iter().zip(&up).map(|(c, p)| coeff * (c - p)).collect();
        grads.push(if normalize_features {
            normalize_backward(&uc, n, crate::numerics::norm(zc), &du)
        } else {
            du
        });
    }
    Ok((value / count, grads))
}

pub fn feature_distill_loss(
    prev: &ActivationTrace,
    cur: &ActivationTrace,
    layers: &[usize],
    normalize_features: bool,
) -> Result<f64> {
    feature_distill_term(prev, cur, layers, normalize_features).map(|(v, _)| v)
}

/// Result of evaluating the training objective on one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    /// Ordered as [`Backbone::trainable_params`] for the same class list.
    pub gradient: Option<Vec<f64>>,
    /// Samples whose current-task prediction was correct.
    pub correct: usize,
}

/// `CE over classes + λ · align` at the backbone's newest horizon.
///
/// `classes` are the current task's labels. With `λ = 0` or strategy `none`
/// the previous-horizon pass is skipped and the align term is reported as 0.
pub fn total_loss(
    backbone: &Backbone,
    batch: &[&Sample],
    classes: &[usize],
    align: &AlignmentConfig,
    lambda: f64,
    with_grad: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::contract("total loss over an empty batch"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let big_l = backbone.layers();
    align.validate(big_l)?;
    let d = backbone.width();
    let t = backbone.newest_task();
    let use_align = lambda != 0.0 && align.strategy != Strategy::None;
    if use_align && t == 0 {
        return Err(Error::contract("alignment needs a task adapter"));
    }
    let n = batch.len() as f64;

    let w_cur = backbone.effective_weights(t)?;
    let w_prev = if use_align {
        Some(backbone.effective_weights(t - 1)?)
    } else {
        None
    };

    let mut cur = Vec::with_capacity(batch.len());
    let mut prev = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        let label = classes
            .iter()
            .position(|&c| c == s.y)
            .ok_or_else(|| Error::contract(format!("label {} is not a current-task class", s.y)))?;
        labels.push(label);
        cur.push(backbone.forward_with(&w_cur, &s.x, classes, t)?);
        if let Some(w) = &w_prev {
            prev.push(backbone.forward_with(w, &s.x, classes, t - 1)?);
        }
    }

    let mut ce = 0.0;
    let mut correct = 0;
    let mut dlogits = Vec::with_capacity(batch.len());
    for (tr, &y) in cur.iter().zip(&labels) {
        let (v, mut g) = cross_entropy_grad(&tr.logits, y)?;
        ce += v;
        if tr.predicted() == Some(classes[y]) {
            correct += 1;
        }
        g.iter_mut().for_each(|x| *x /= n);
        dlogits.push(g);
    }
    ce /= n;

    let mut dz: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d]; big_l + 1]; batch.len()];
    let mut align_value = 0.0;
    if use_align {
        let scale = lambda / n;
        match align.strategy {
            Strategy::Eigen | Strategy::P2p => {
                let layers = align.layers(big_l);
                for (i, (p, c)) in prev.iter().zip(&cur).enumerate() {
                    let rp = relation_matrix(p, align.phi, &layers)?;
                    let rc = relation_matrix(c, align.phi, &layers)?;
                    let term = if align.strategy == Strategy::Eigen {
                        sv_align_loss(&rp, &rc)?
                    } else {
                        p2p_loss(&rp, &rc)?
                    };
                    align_value += term.value;
                    if with_grad {
                        let g = term.grad.scale(scale);
                        for (&l, gz) in layers
                            .iter()
                            .zip(relation_backward(c, align.phi, &layers, &g))
                        {
                            add_into(&mut dz[i][l], &gz);
                        }
                    }
                }
                align_value /= n;
            }
            Strategy::BEigen => {
                let layers = align.layers(big_l);
                let rp: Vec<RelationMatrix> = prev
                    .iter()
                    .map(|p| relation_matrix(p, align.phi, &layers))
                    .collect::<Result<_>>()?;
                let rc: Vec<RelationMatrix> = cur
                    .iter()
                    .map(|c| relation_matrix(c, align.phi, &layers))
                    .collect::<Result<_>>()?;
                let term = batch_eigen_loss(&rp, &rc)?;
                align_value = term.value;
                if with_grad {
                    let g = term.grad.scale(scale);
                    for (i, c) in cur.iter().enumerate() {
                        for (&l, gz) in layers
                            .iter()
                            .zip(relation_backward(c, align.phi, &layers, &g))
                        {
                            add_into(&mut dz[i][l], &gz);
                        }
                    }
                }
            }
            Strategy::FeatureLast | Strategy::FeatureAll => {
                let layers = align.feature_layers(big_l);
                for (i, (p, c)) in prev.iter().zip(&cur).enumerate() {
                    let (v, grads) = feature_distill_term(p, c, &layers, align.normalize_features)?;
                    align_value += v;
                    if with_grad {
                        for (&l, gz) in layers.iter().zip(grads) {
                            for (a, b) in dz[i][l].iter_mut().zip(&gz) {
                                *a += scale * b;
                            }
                        }
                    }
                }
                align_value /= n;
            }
            Strategy::None => unreachable!("checked by use_align"),
        }
    }

    let breakdown = LossBreakdown::new(ce, align_value, lambda);
    if !breakdown.total.is_finite() {
        return Err(Error::numerical(
            format!("total loss ({} strategy)", align.strategy),
            format!("ce {} align {}", breakdown.ce, breakdown.align),
        ));
    }

    let gradient = if with_grad {
        let mut grads = LayerGrads::zeros(big_l, d);
        for ((tr, dzi), dl) in cur.iter().zip(&dz).zip(&dlogits) {
            backbone.backprop(&w_cur, tr, dzi, dl, &mut grads);
        }
        Some(backbone.flatten_trainable_grads(&grads, classes))
    } else {
        None
    };
    Ok(BatchLoss {
        breakdown,
        gradient,
        correct,
    })
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// The training objective as a function of the newest task's trainable
/// parameters.
#[derive(Debug, Clone)]
pub struct TotalLossObjective {
    backbone: Backbone,
    batch: Vec<Sample>,
    classes: Vec<usize>,
    align: AlignmentConfig,
    lambda: f64,
}

impl TotalLossObjective {
    pub fn new(
        backbone: Backbone,
        batch: Vec<Sample>,
        classes: Vec<usize>,
        align: AlignmentConfig,
        lambda: f64,
    ) -> Self {
        Self {
            backbone,
            batch,
            classes,
            align,
            lambda,
        }
    }

    pub fn params(&self) -> Result<Vec<f64>> {
        self.backbone.trainable_params(&self.classes)
    }

    fn evaluate(&self, params: &[f64], with_grad: bool) -> Result<BatchLoss> {
        let mut b = self.backbone.clone();
        b.set_trainable_params(&self.classes, params)?;
        let refs: Vec<&Sample> = self.batch.iter().collect();
        total_loss(
            &b,
            &refs,
            &self.classes,
            &self.align,
            self.lambda,
            with_grad,
        )
    }
}

impl Objective for TotalLossObjective {
    fn param_count(&self) -> usize {
        self.backbone.trainable_count(&self.classes)
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.evaluate(params, false)?.breakdown.total)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<GradRecord> {
        let out = self.evaluate(params, true)?;
        Ok(GradRecord {
            value: out.breakdown.total,
            gradient: out.gradient.expect("requested"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub count: usize,
}

/// Mean and shrunk sample covariance `Σ + ε·(tr Σ/d)·I`; a zero-trace
/// covariance falls back to `ε·I`.
pub fn fit_class_stats(class: usize, features: &[Vec<f64>], shrinkage: f64) -> Result<ClassStats> {
    let first = features
        .first()
        .ok_or_else(|| Error::contract(format!("class {class} has no features")))?;
    let d = first.len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::contract(format!(
            "class {class} features differ in length"
        )));
    }
    let n = features.len();
    let mut mean = vec![0.0; d];
    for f in features {
        add_into(&mut mean, f);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    if n > 1 {
        for f in features {
            let c: Vec<f64> = f.iter().zip(&mean).map(|(a, b)| a - b).collect();
            cov.add_outer(1.0 / (n - 1) as f64, &c, &c);
        }
    }
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    let floor = if trace > 0.0 {
        shrinkage * trace / d as f64
    } else {
        shrinkage
    };
    for i in 0..d {
        cov.as_mut_slice()[i * d + i] += floor;
    }
    Ok(ClassStats {
        class,
        mean,
        covariance: cov,
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecalibrationConfig {
    pub enabled: bool,
    pub samples_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub shrinkage: f64,
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            samples_per_class: 256,
            epochs: 5,
            lr: 1e-2,
            batch_size: 32,
            shrinkage: 1e-4,
        }
    }
}

impl RecalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("recalibration.batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.shrinkage > 0.0) {
            return Err(Error::config(
                "recalibration.lr and recalibration.shrinkage must be positive",
            ));
        }
        Ok(())
    }
}

/// Draws `samples_per_class` pseudo-features per class from `N(μ_c, Σ_c)`.
pub fn sample_pseudo_features(
    stats: &BTreeMap<usize, ClassStats>,
    classes: &[usize],
    samples_per_class: usize,
    rng: &mut Rng,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(classes.len() * samples_per_class);
    for &c in classes {
        let s = stats
            .get(&c)
            .ok_or_else(|| Error::contract(format!("no statistics for class {c}")))?;
        let l = cholesky(&s.covariance)?;
        for _ in 0..samples_per_class {
            let xi = rng.normal_vec(s.mean.len(), 1.0);
            let mut x = l.matvec(&xi);
            add_into(&mut x, &s.mean);
            out.push(Sample { x, y: c });
        }
    }
    Ok(out)
}

/// Refits the heads of `classes` by minibatch gradient descent on
/// cross-entropy over pseudo-features. The backbone is not modified; the new
/// heads are returned.
pub fn recalibrate_classifier(
    backbone: &Backbone,
    stats: &BTreeMap<usize, ClassStats>,
    classes: &[usize],
    cfg: &RecalibrationConfig,
    rng: &mut Rng,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut heads = backbone.heads().clone();
    if cfg.epochs == 0 || classes.is_empty() {
        return Ok(heads);
    }
    cfg.validate()?;
    let d = backbone.width();
    let pseudo = sample_pseudo_features(stats, classes, cfg.samples_per_class, rng)?;
    let label_of: BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut w: Vec<Vec<f64>> = classes
        .iter()
        .map(|c| heads.get(c).cloned().unwrap_or_else(|| vec![0.0; d]))
        .collect();
    let mut order: Vec<usize> = (0..pseudo.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let scale = cfg.lr / chunk.len() as f64;
            let mut grad = vec![vec![0.0; d]; classes.len()];
            for &i in chunk {
                let s = &pseudo[i];
                let logits: Vec<f64> = w.iter().map(|wk| crate::numerics::dot(&s.x, wk)).collect();
                let mut p = softmax(&logits);
                p[label_of[&s.y]] -= 1.0;
                for (gk, pk) in grad.iter_mut().zip(&p) {
                    for (g, x) in gk.iter_mut().zip(&s.x) {
                        *g += pk * x;
                    }
                }
            }
            for (wk, gk) in w.iter_mut().zip(&grad) {
                for (a, g) in wk.iter_mut().zip(gk) {
                    *a -= scale * g;
                }
            }
        }
    }
    for (&c, wk) in classes.iter().zip(w) {
        if wk.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "recalibration",
                format!("head for class {c} diverged"),
            ));
        }
        heads.insert(c, wk);
    }
    Ok(heads)
}
