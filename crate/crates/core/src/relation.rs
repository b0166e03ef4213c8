//! Per-sample inter-layer relation matrices, singular-value alignment and its
//! baselines, drift and the Weyl diagnostic.

use serde::{Deserialize, Serialize};

use crate::backbone::ActivationTrace;
use crate::error::{Error, Result};
use crate::numerics::{dot, frobenius_norm, norm, singular_triplets, singular_values, Matrix, Rng};

/// Norms below this are clamped before cosine normalization.
pub const NORM_FLOOR: f64 = 1e-4;
/// Tolerance added to `‖E‖_F` by the Weyl check.
pub const WEYL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    Cosine,
    #[default]
    Inner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Eigen,
    BEigen,
    P2p,
    FeatureLast,
    FeatureAll,
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::FeatureLast,
        Strategy::FeatureAll,
        Strategy::P2p,
        Strategy::BEigen,
        Strategy::Eigen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Eigen => "eigen",
            Strategy::BEigen => "b_eigen",
            Strategy::P2p => "p2p",
            Strategy::FeatureLast => "feature_last",
            Strategy::FeatureAll => "feature_all",
            Strategy::None => "none",
        }
    }

    pub fn uses_relations(self) -> bool {
        matches!(self, Strategy::Eigen | Strategy::BEigen | Strategy::P2p)
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Strategy::FeatureLast | Strategy::FeatureAll)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub strategy: Strategy,
    pub normalize_features: bool,
    pub phi: Phi,
    /// Layers (1-based, ordered) entering `R`; empty selects `1..=L`.
    #[serde(default)]
    pub layer_subset: Vec<usize>,
    pub huber_delta: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Eigen,
            normalize_features: true,
            phi: Phi::Inner,
            layer_subset: Vec::new(),
            huber_delta: 1.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.huber_delta != 1.0 {
            return Err(Error::config("alignment.huber_delta is fixed at 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.layer_subset {
            if l == 0 || l > layers {
                return Err(Error::config(format!(
                    "alignment.layer_subset contains {l}, valid layers are 1..={layers}"
                )));
            }
            if !seen.insert(l) {
                return Err(Error::config(format!(
                    "alignment.layer_subset repeats layer {l}"
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self, total: usize) -> Vec<usize> {
        if self.layer_subset.is_empty() {
            (1..=total).collect()
        } else {
            self.layer_subset.clone()
        }
    }

    /// Layers compared by the feature-distillation baselines.
    pub fn feature_layers(&self, total: usize) -> Vec<usize> {
        match self.strategy {
            Strategy::FeatureLast => vec![total],
            _ => self.layers(total),
        }
    }
}

/// Unit Huber penalty: `½δ²` for `|δ| < 1`, `|δ| − ½` otherwise.
pub fn huber(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        0.5 * delta * delta
    } else {
        delta.abs() - 0.5
    }
}

pub fn huber_grad(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        delta
    } else {
        delta.signum()
    }
}

/// `z / max(‖z‖, NORM_FLOOR)` together with the divisor used.
pub fn normalize(z: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(z).max(NORM_FLOOR);
    (z.iter().map(|v| v / n).collect(), n)
}

/// Pulls a gradient with respect to `normalize(z).0` back to `z`.
pub fn normalize_backward(u: &[f64], n: f64, raw_norm: f64, du: &[f64]) -> Vec<f64> {
    if raw_norm > NORM_FLOOR {
        let proj = dot(du, u);
        du.iter()
            .zip(u)
            .map(|(g, ui)| (g - proj * ui) / n)
            .collect()
    } else {
        du.iter().map(|g| g / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub entries: Matrix,
    pub phi: Phi,
    pub horizon: usize,
    pub layers: Vec<usize>,
    pub sample: Option<usize>,
    /// Layer states whose norm fell below [`NORM_FLOOR`] under cosine.
    pub clamped: usize,
}

impl RelationMatrix {
    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn singular_values(&self) -> Result<Vec<f64>> {
        singular_values(&self.entries)
    }

    fn check_compatible(&self, other: &RelationMatrix) -> Result<()> {
        if self.phi != other.phi {
            return Err(Error::contract(
                "relation matrices use different similarity functions",
            ));
        }
        if !self.entries.same_shape(&other.entries) {
            return Err(Error::contract(format!(
                "relation matrices are {}×{} and {}×{}",
                self.size(),
                self.size(),
                other.size(),
                other.size()
            )));
        }
        Ok(())
    }
}

/// `R_ab = φ(z^{ℓ_a}, z^{ℓ_b})` over the given layers.
pub fn relation_matrix(
    trace: &ActivationTrace,
    phi: Phi,
    layers: &[usize],
) -> Result<RelationMatrix> {
    let total = trace.layers();
    if layers.is_empty() {
        return Err(Error::contract("relation matrix needs at least one layer"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > total) {
        return Err(Error::contract(format!("layer {bad} outside 1..={total}")));
    }
    let mut clamped = 0;
    let vecs: Vec<Vec<f64>> = layers
        .iter()
        .map(|&l| {
            let z = trace.state(l);
            match phi {
                Phi::Inner => z.to_vec(),
                Phi::Cosine => {
                    if norm(z) <= NORM_FLOOR {
                        clamped += 1;
                    }
                    normalize(z).0
                }
            }
        })
        .collect();
    Ok(RelationMatrix {
        entries: gram(&vecs),
        phi,
        horizon: trace.horizon,
        layers: layers.to_vec(),
        sample: None,
        clamped,
    })
}

fn gram(vecs: &[Vec<f64>]) -> Matrix {
    let n = vecs.len();
    let mut m = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = dot(&vecs[a], &vecs[b]);
            m.as_mut_slice()[a * n + b] = v;
            m.as_mut_slice()[b * n + a] = v;
        }
    }
    m
}

/// Gradients with respect to the layer states in `layers`, given `G = ∂L/∂R`.
pub fn relation_backward(
    trace: &ActivationTrace,
    phi: Phi,
    layers: &[usize],
    g: &Matrix,
) -> Vec<Vec<f64>> {
    let n = layers.len();
    let raw: Vec<&[f64]> = layers.iter().map(|&l| trace.state(l)).collect();
    let normed: Vec<(Vec<f64>, f64)> = match phi {
        Phi::Inner => raw.iter().map(|z| (z.to_vec(), 1.0)).collect(),
        Phi::Cosine => raw.iter().map(|z| normalize(z)).collect(),
    };
    (0..n)
        .map(|a| {
            let mut q = vec![0.0; raw[a].len()];
            for b in 0..n {
                let w = g[(a, b)] + g[(b, a)];
                if w == 0.0 {
                    continue;
                }
                for (qi, ui) in q.iter_mut().zip(&normed[b].0) {
                    *qi += w * ui;
                }
            }
            match phi {
                Phi::Inner => q,
                Phi::Cosine => normalize_backward(&normed[a].0, normed[a].1, norm(raw[a]), &q),
            }
        })
        .collect()
}

/// A loss value with its gradient with respect to the current-model matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTerm {
    pub value: f64,
    pub grad: Matrix,
}

/// Symmetric matrices whose spectra are aligned by descending index.
fn sv_align_entries(prev: &Matrix, cur: &Matrix) -> Result<AlignTerm> {
    if !prev.same_shape(cur) {
        return Err(Error::contract("relation matrices differ in shape"));
    }
    let n = cur.rows();
    let sp = singular_values(prev)?;
    let tc = singular_triplets(cur)?;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for (s_prev, trip) in sp.iter().zip(&tc) {
        let delta = s_prev - trip.value;
        value += huber(delta);
        let coeff = -huber_grad(delta) * trip.sign / n as f64;
        if coeff != 0.0 {
            grad.add_outer(coeff, &trip.vector, &trip.vector);
        }
    }
    Ok(AlignTerm {
        value: value / n as f64,
        grad,
    })
}

/// `(1/n) Σ ρ(sv_i(R_prev) − sv_i(R_cur))`
pub fn sv_align_loss(prev: &RelationMatrix, cur: &RelationMatrix) -> Result<AlignTerm> {
    prev.check_compatible(cur)?;
    sv_align_entries(&prev.entries, &cur.entries)
}

/// Mean entrywise Huber penalty.
pub fn p2p_loss(prev: &RelationMatrix, cur: &RelationMatrix) -> Result<AlignTerm> {
    prev.check_compatible(cur)?;
    let n = cur.size();
    let count = (n * n) as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for ((p, c), g) in prev
        .entries
        .as_slice()
        .iter()
        .zip(cur.entries.as_slice())
        .zip(grad.as_mut_slice())
    {
        let delta = p - c;
        value += huber(delta);
        *g = -huber_grad(delta) / count;
    }
    Ok(AlignTerm {
        value: value / count,
        grad,
    })
}

fn average(batch: &[RelationMatrix]) -> Result<Matrix> {
    let first = batch
        .first()
        .ok_or_else(|| Error::contract("batch eigen loss needs a non-empty batch"))?;
    let mut sum = Matrix::zeros(first.size(), first.size());
    for r in batch {
        first.check_compatible(r)?;
        sum.add_assign(&r.entries)?;
    }
    sum.scale_in_place(1.0 / batch.len() as f64);
    Ok(sum)
}

/// Spectral alignment of the batch-averaged relation matrices. The gradient is
/// with respect to the averaged current matrix; each sample receives it scaled
/// by `1/|batch|`.
pub fn batch_eigen_loss(prev: &[RelationMatrix], cur: &[RelationMatrix]) -> Result<AlignTerm> {
    if prev.len() != cur.len() {
        return Err(Error::contract(
            "batch eigen loss needs equally sized batches",
        ));
    }
    let (p, c) = (average(prev)?, average(cur)?);
    prev[0].check_compatible(&cur[0])?;
    sv_align_entries(&p, &c)
}

/// `‖R_a − R_b‖_F`
pub fn relation_drift(a: &RelationMatrix, b: &RelationMatrix) -> Result<f64> {
    a.check_compatible(b)?;
    Ok(frobenius_norm(&a.entries.sub(&b.entries)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeylReport {
    pub max_gap: f64,
    pub perturbation_norm: f64,
    pub holds: bool,
}

/// Checks `max_i |sv_i(R + E) − sv_i(R)| ≤ ‖E‖_F + 1e-9`.
pub fn weyl_check(r: &Matrix, e: &Matrix) -> Result<WeylReport> {
    if !r.is_square() || !r.same_shape(e) {
        return Err(Error::contract(
            "weyl check needs square matrices of equal shape",
        ));
    }
    let before = singular_values(r)?;
    let after = singular_values(&r.add(e)?)?;
    let max_gap = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let perturbation_norm = frobenius_norm(e);
    Ok(WeylReport {
        max_gap,
        perturbation_norm,
        holds: max_gap <= perturbation_norm + WEYL_TOL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeylSweep {
    pub cases: usize,
    pub violations: usize,
    /// Smallest `‖E‖_F + tol − max gap` observed.
    pub min_slack: f64,
}

/// Random PSD Gram pairs `(R, R')` of sizes 2..=8, checked with `E = R' − R`.
pub fn weyl_sweep(cases: usize, rng: &mut Rng) -> Result<WeylSweep> {
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..cases {
        let n = 2 + rng.below(7);
        let d = n + rng.below(4);
        let scale = 0.01 + rng.uniform();
        let base: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(d, 1.0)).collect();
        let moved: Vec<Vec<f64>> = base
            .iter()
            .map(|v| v.iter().map(|x| x + scale * rng.normal()).collect())
            .collect();
        let r = gram(&base);
        let e = gram(&moved).sub(&r)?;
        let report = weyl_check(&r, &e)?;
        min_slack = min_slack.min(report.perturbation_norm + WEYL_TOL - report.max_gap);
        if !report.holds {
            violations += 1;
        }
    }
    Ok(WeylSweep {
        cases,
        violations,
        min_slack,
    })
}
