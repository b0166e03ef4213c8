//! Residual network with frozen base weights, a per-task low-rank adapter
//! stack and bias-free linear class heads.
//!
//! Each block computes `h = tanh(W z + b)` and `z ← z + h`, where the effective
//! weight at horizon `t` is `W₀ + Σ_{j≤t} B_j A_j`. Layers are numbered `1..=L`
//! in the public API; `z⁰` is the frozen embedding of the input.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Rng};
use crate::stream::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub width: usize,
    pub layers: usize,
    #[serde(default)]
    pub activation: Activation,
    pub rank: usize,
    /// Layers (1-based) that receive adapters; empty means every layer.
    #[serde(default)]
    pub adapter_targets: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            width: 32,
            layers: 6,
            activation: Activation::Tanh,
            rank: 4,
            adapter_targets: Vec::new(),
            pretrain_epochs: 30,
            pretrain_lr: 0.05,
            pretrain_batch: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::config("backbone.layers must be at least 2"));
        }
        if self.width == 0 || self.input_dim == 0 {
            return Err(Error::config(
                "backbone.width and backbone.input_dim must be positive",
            ));
        }
        if self.rank == 0 || self.rank > self.width {
            return Err(Error::config(format!(
                "backbone.rank must lie in 1..={} (width)",
                self.width
            )));
        }
        if let Some(&bad) = self
            .adapter_targets
            .iter()
            .find(|&&l| l == 0 || l > self.layers)
        {
            return Err(Error::config(format!(
                "backbone.adapter_targets contains invalid layer {bad}"
            )));
        }
        if self.pretrain_batch == 0 {
            return Err(Error::config("backbone.pretrain_batch must be positive"));
        }
        Ok(())
    }

    pub fn targets_layer(&self, layer: usize) -> bool {
        self.adapter_targets.is_empty() || self.adapter_targets.contains(&layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankPair {
    /// `r × d`
    pub a: Matrix,
    /// `d × r`
    pub b: Matrix,
}

impl LowRankPair {
    pub fn product(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter shapes are fixed at creation")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAdapter {
    pub task: usize,
    /// One entry per layer; `None` for layers that are not adapted.
    pub layers: Vec<Option<LowRankPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    weight: Matrix,
    bias: Vec<f64>,
}

/// Per-sample layer states for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    /// `z[ℓ] = zˡ` for `ℓ = 0..=L`.
    pub z: Vec<Vec<f64>>,
    /// `h[ℓ-1] = hˡ` for `ℓ = 1..=L`.
    pub h: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub logits: Vec<f64>,
    pub horizon: usize,
}

impl ActivationTrace {
    pub fn layers(&self) -> usize {
        self.h.len()
    }

    pub fn state(&self, layer: usize) -> &[f64] {
        &self.z[layer]
    }

    pub fn residual(&self, layer: usize) -> &[f64] {
        &self.h[layer - 1]
    }

    pub fn last(&self) -> &[f64] {
        self.z.last().expect("trace has at least z⁰")
    }

    /// `argmax_k logits_k`, ties to the lowest class id.
    pub fn predicted(&self) -> Option<usize> {
        argmax_lowest(&self.classes, &self.logits)
    }
}

/// `argmax` over `scores`, ties broken by the lowest id in `ids`.
pub fn argmax_lowest(ids: &[usize], scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&k, &s) in ids.iter().zip(scores) {
        best = match best {
            None => Some((k, s)),
            Some((bk, bs)) if s > bs || (s == bs && k < bk) => Some((k, s)),
            keep => keep,
        };
    }
    best.map(|(k, _)| k)
}

/// Gradients of a scalar loss with respect to the full per-layer weights,
/// biases and the heads that were used.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
    pub heads: BTreeMap<usize, Vec<f64>>,
}

impl LayerGrads {
    pub fn zeros(layers: usize, width: usize) -> Self {
        Self {
            weight: vec![Matrix::zeros(width, width); layers],
            bias: vec![vec![0.0; width]; layers],
            heads: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    config: BackboneConfig,
    seed: u64,
    /// `d × input_dim`
    embed: Matrix,
    blocks: Vec<Block>,
    adapters: Vec<TaskAdapter>,
    heads: BTreeMap<usize, Vec<f64>>,
}

impl Backbone {
    /// Random initialization from the `init` stream: embedding and base weights
    /// scaled by the inverse square root of their fan-in.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, crate::numerics::streams::INIT).derive("backbone");
        let d = config.width;
        let embed_scale = 1.0 / (config.input_dim as f64).sqrt();
        let embed = Matrix::from_fn(d, config.input_dim, |_, _| embed_scale * rng.normal());
        let w_scale = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                weight: Matrix::from_fn(d, d, |_, _| w_scale * rng.normal()),
                bias: rng.normal_vec(d, 0.1),
            })
            .collect();
        Ok(Self {
            config,
            seed,
            embed,
            blocks,
            adapters: Vec::new(),
            heads: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    /// Index of the newest task with an adapter (0 when none).
    pub fn newest_task(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapters(&self) -> &[TaskAdapter] {
        &self.adapters
    }

    pub fn heads(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.heads
    }

    pub fn head(&self, class: usize) -> Option<&[f64]> {
        self.heads.get(&class).map(Vec::as_slice)
    }

    pub fn set_head(&mut self, class: usize, w: Vec<f64>) -> Result<()> {
        if w.len() != self.config.width {
            return Err(Error::contract(format!(
                "head for class {class} needs {} entries",
                self.config.width
            )));
        }
        self.heads.insert(class, w);
        Ok(())
    }

    pub fn replace_heads(&mut self, heads: BTreeMap<usize, Vec<f64>>) {
        self.heads = heads;
    }

    /// Zero heads for classes that do not have one yet.
    pub fn ensure_heads(&mut self, classes: &[usize]) {
        let d = self.config.width;
        for &c in classes {
            self.heads.entry(c).or_insert_with(|| vec![0.0; d]);
        }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::contract(format!(
                "input has {} entries, backbone expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(self.embed.matvec(x))
    }

    /// Appends a zero-initialized adapter for task `t`; `A` entries are drawn
    /// from `N(0, 1/r)`.
    pub fn add_task_adapter(&mut self, t: usize, rng: &mut Rng) -> Result<&TaskAdapter> {
        if t != self.adapters.len() + 1 {
            return Err(Error::contract(format!(
                "adapter for task {t} requested but tasks 1..={} exist",
                self.adapters.len()
            )));
        }
        let (d, r) = (self.config.width, self.config.rank);
        let scale = 1.0 / (r as f64).sqrt();
        let layers = (1..=self.config.layers)
            .map(|l| {
                self.config.targets_layer(l).then(|| LowRankPair {
                    a: Matrix::from_fn(r, d, |_, _| scale * rng.normal()),
                    b: Matrix::zeros(d, r),
                })
            })
            .collect();
        self.adapters.push(TaskAdapter { task: t, layers });
        Ok(self.adapters.last().expect("just pushed"))
    }

    fn check_horizon(&self, horizon: usize) -> Result<()> {
        if horizon > self.adapters.len() {
            return Err(Error::contract(format!(
                "horizon {horizon} exceeds newest task {}",
                self.adapters.len()
            )));
        }
        Ok(())
    }

    /// `W₀ˡ + Σ_{j≤horizon} B_jˡ A_jˡ`
    pub fn effective_weight(&self, layer: usize, horizon: usize) -> Result<Matrix> {
        self.check_horizon(horizon)?;
        if layer == 0 || layer > self.config.layers {
            return Err(Error::contract(format!("layer {layer} out of range")));
        }
        let mut w = self.blocks[layer - 1].weight.clone();
        for adapter in &self.adapters[..horizon] {
            if let Some(pair) = &adapter.layers[layer - 1] {
                w.add_assign(&pair.product())?;
            }
        }
        Ok(w)
    }

    pub fn effective_weights(&self, horizon: usize) -> Result<Vec<Matrix>> {
        (1..=self.config.layers)
            .map(|l| self.effective_weight(l, horizon))
            .collect()
    }

    /// Forward pass with precomputed effective weights.
    pub fn forward_with(
        &self,
        weights: &[Matrix],
        x: &[f64],
        classes: &[usize],
        horizon: usize,
    ) -> Result<ActivationTrace> {
        let z0 = self.embed(x)?;
        let act = self.config.activation;
        let mut z = Vec::with_capacity(weights.len() + 1);
        let mut h = Vec::with_capacity(weights.len());
        z.push(z0);
        for (w, block) in weights.iter().zip(&self.blocks) {
            let prev = z.last().expect("non-empty");
            let pre = w.matvec(prev);
            let hl: Vec<f64> = pre
                .iter()
                .zip(&block.bias)
                .map(|(a, b)| act.apply(a + b))
                .collect();
            let zl: Vec<f64> = prev.iter().zip(&hl).map(|(a, b)| a + b).collect();
            h.push(hl);
            z.push(zl);
        }
        let last = z.last().expect("non-empty");
        let logits = classes
            .iter()
            .map(|c| {
                self.heads
                    .get(c)
                    .map(|w| dot(last, w))
                    .ok_or_else(|| Error::contract(format!("no head for class {c}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(ActivationTrace {
            z,
            h,
            classes: classes.to_vec(),
            logits,
            horizon,
        })
    }

    pub fn forward(&self, x: &[f64], horizon: usize, classes: &[usize]) -> Result<ActivationTrace> {
        let weights = self.effective_weights(horizon)?;
        self.forward_with(&weights, x, classes, horizon)
    }

    /// Traces under the previous (`t-1`) and current (`t`) horizons. Callers
    /// treat the first as a constant: no gradient is routed through it.
    pub fn dual_forward(
        &self,
        x: &[f64],
        t: usize,
        classes: &[usize],
    ) -> Result<(ActivationTrace, ActivationTrace)> {
        if t == 0 || t > self.adapters.len() {
            return Err(Error::contract(format!("no adapter for task {t}")));
        }
        Ok((
            self.forward(x, t - 1, classes)?,
            self.forward(x, t, classes)?,
        ))
    }

    /// Reverse pass for one trace.
    ///
    /// `dz[ℓ]` holds direct loss gradients with respect to `zˡ` (the final
    /// state's entry should already include any head contribution) and
    /// `dlogits` the gradients with respect to `trace.logits`. Contributions are
    /// accumulated into `grads`.
    pub fn backprop(
        &self,
        weights: &[Matrix],
        trace: &ActivationTrace,
        dz: &[Vec<f64>],
        dlogits: &[f64],
        grads: &mut LayerGrads,
    ) {
        let d = self.config.width;
        let big_l = weights.len();
        let act = self.config.activation;
        let last = trace.last();

        let mut g: Vec<f64> = dz[big_l].clone();
        for (k, &dl) in trace.classes.iter().zip(dlogits) {
            if dl == 0.0 {
                continue;
            }
            let w = &self.heads[k];
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += dl * wi;
            }
            let hg = grads.heads.entry(*k).or_insert_with(|| vec![0.0; d]);
            for (hgi, zi) in hg.iter_mut().zip(last) {
                *hgi += dl * zi;
            }
        }

        for l in (0..big_l).rev() {
            let h = &trace.h[l];
            let da: Vec<f64> = g
                .iter()
                .zip(h)
                .map(|(gi, hi)| gi * act.derivative_from_output(*hi))
                .collect();
            grads.weight[l].add_outer(1.0, &da, &trace.z[l]);
            for (bg, a) in grads.bias[l].iter_mut().zip(&da) {
                *bg += a;
            }
            let back = weights[l].matvec_t(&da);
            for ((gi, bi), di) in g.iter_mut().zip(&back).zip(&dz[l]) {
                *gi += bi + di;
            }
        }
    }

    /// Number of trainable scalars at the newest task: its adapter plus the
    /// heads of `classes`.
    pub fn trainable_count(&self, classes: &[usize]) -> usize {
        let adapter: usize = self
            .adapters
            .last()
            .map(|a| {
                a.layers
                    .iter()
                    .flatten()
                    .map(|p| p.a.as_slice().len() + p.b.as_slice().len())
                    .sum()
            })
            .unwrap_or(0);
        adapter + classes.len() * self.config.width
    }

    /// Flattened trainable parameters: for each adapted layer `A` then `B`
    /// (row-major), then the heads of `classes` in the given order.
    pub fn trainable_params(&self, classes: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.trainable_count(classes));
        if let Some(a) = self.adapters.last() {
            for p in a.layers.iter().flatten() {
                out.extend_from_slice(p.a.as_slice());
                out.extend_from_slice(p.b.as_slice());
            }
        }
        for c in classes {
            let w = self
                .heads
                .get(c)
                .ok_or_else(|| Error::contract(format!("no head for class {c}")))?;
            out.extend_from_slice(w);
        }
        Ok(out)
    }

    pub fn set_trainable_params(&mut self, classes: &[usize], params: &[f64]) -> Result<()> {
        let n = self.trainable_count(classes);
        if params.len() != n {
            return Err(Error::contract(format!(
                "expected {n} trainable parameters, got {}",
                params.len()
            )));
        }
        let mut off = 0;
        if let Some(a) = self.adapters.last_mut() {
            for p in a.layers.iter_mut().flatten() {
                let na = p.a.as_slice().len();
                p.a.as_mut_slice().copy_from_slice(&params[off..off + na]);
                off += na;
                let nb = p.b.as_slice().len();
                p.b.as_mut_slice().copy_from_slice(&params[off..off + nb]);
                off += nb;
            }
        }
        let d = self.config.width;
        for &c in classes {
            self.heads.insert(c, params[off..off + d].to_vec());
            off += d;
        }
        Ok(())
    }

    /// Maps full-weight gradients of the newest task's layers onto its adapter:
    /// `∂B = ∂W Aᵀ`, `∂A = Bᵀ ∂W`. Output follows [`Self::trainable_params`].
    pub fn flatten_trainable_grads(&self, grads: &LayerGrads, classes: &[usize]) -> Vec<f64> {
        let d = self.config.width;
        let mut out = Vec::with_capacity(self.trainable_count(classes));
        if let Some(adapter) = self.adapters.last() {
            for (l, pair) in adapter.layers.iter().enumerate() {
                let Some(p) = pair else { continue };
                let dw = &grads.weight[l];
                let da = p.b.transpose().matmul(dw).expect("shapes fixed");
                let db = dw.matmul(&p.a.transpose()).expect("shapes fixed");
                out.extend_from_slice(da.as_slice());
                out.extend_from_slice(db.as_slice());
            }
        }
        for c in classes {
            match grads.heads.get(c) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        out
    }

    /// Bytes of everything frozen before task `t`: embedding, base blocks and
    /// adapters `1..t`.
    pub fn frozen_bytes(&self, t: usize) -> Vec<u8> {
        #[derive(Serialize)]
        struct Frozen<'a> {
            embed: &'a Matrix,
            blocks: &'a [Block],
            adapters: &'a [TaskAdapter],
        }
        let upto = t.saturating_sub(1).min(self.adapters.len());
        serde_json::to_vec(&Frozen {
            embed: &self.embed,
            blocks: &self.blocks,
            adapters: &self.adapters[..upto],
        })
        .expect("plain data serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b: Backbone = serde_json::from_slice(&fs::read(path)?)?;
        b.config.validate()?;
        Ok(b)
    }

    /// Trains base weights, biases and temporary base-class heads with
    /// minibatch gradient descent on cross-entropy, then drops the heads.
    fn pretrain(&mut self, base: &[Sample], rng: &mut Rng) -> Result<()> {
        let classes: Vec<usize> = base
            .iter()
            .map(|s| s.y)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if base.is_empty() || self.config.pretrain_epochs == 0 {
            return Ok(());
        }
        let d = self.config.width;
        for &c in &classes {
            self.heads.insert(c, rng.normal_vec(d, 0.01));
        }
        let lr = self.config.pretrain_lr;
        let mut order: Vec<usize> = (0..base.len()).collect();
        for _ in 0..self.config.pretrain_epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(self.config.pretrain_batch) {
                let weights = self.effective_weights(0)?;
                let mut grads = LayerGrads::zeros(self.config.layers, d);
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let s = &base[i];
                    let trace = self.forward_with(&weights, &s.x, &classes, 0)?;
                    let label = classes.binary_search(&s.y).expect("label collected above");
                    let dlogits: Vec<f64> = crate::objectives::softmax(&trace.logits)
                        .into_iter()
                        .enumerate()
                        .map(|(k, p)| scale * (p - if k == label { 1.0 } else { 0.0 }))
                        .collect();
                    let dz = vec![vec![0.0; d]; self.config.layers + 1];
                    self.backprop(&weights, &trace, &dz, &dlogits, &mut grads);
                }
                for (block, (gw, gb)) in self
                    .blocks
                    .iter_mut()
                    .zip(grads.weight.iter().zip(&grads.bias))
                {
                    for (w, g) in block.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                        *w -= lr * g;
                    }
                    for (b, g) in block.bias.iter_mut().zip(gb) {
                        *b -= lr * g;
                    }
                }
                for (c, g) in &grads.heads {
                    let w = self.heads.get_mut(c).expect("head exists");
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= lr * gi;
                    }
                }
            }
        }
        Ok(())
    }

    /// Accuracy over `samples` at `horizon` using the heads of `classes`.
    pub fn accuracy(&self, samples: &[Sample], horizon: usize, classes: &[usize]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let weights = self.effective_weights(horizon)?;
        let mut correct = 0usize;
        for s in samples {
            let trace = self.forward_with(&weights, &s.x, classes, horizon)?;
            if trace.predicted() == Some(s.y) {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }
}

/// Builds a backbone from the `init` stream, trains its base weights on
/// `base_data` and freezes them. Base-class heads are discarded afterwards.
pub fn pretrain_base(
    config: &BackboneConfig,
    base_data: &[Sample],
    stream_labels: &BTreeSet<usize>,
    seed: u64,
) -> Result<Backbone> {
    if let Some(s) = base_data.iter().find(|s| stream_labels.contains(&s.y)) {
        return Err(Error::config(format!(
            "base class {} also appears in the task stream",
            s.y
        )));
    }
    let mut backbone = Backbone::new(config.clone(), seed)?;
    let mut rng = Rng::new(seed, crate::numerics::streams::INIT).derive("pretrain");
    backbone.pretrain(base_data, &mut rng)?;
    backbone.heads.clear();
    Ok(backbone)
}

/// Accuracy of the pretrained base weights on their own classes, with the
/// base heads retained. Used to check pretraining quality.
pub fn pretrain_accuracy(config: &BackboneConfig, base_data: &[Sample], seed: u64) -> Result<f64> {
    let mut backbone = Backbone::new(config.clone(), seed)?;
    let mut rng = Rng::new(seed, crate::numerics::streams::INIT).derive("pretrain");
    backbone.pretrain(base_data, &mut rng)?;
    let classes: Vec<usize> = backbone.heads.keys().copied().collect();
    backbone.accuracy(base_data, 0, &classes)
}
