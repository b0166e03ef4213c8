//! Accuracy and forgetting summaries, margins and the numerical evaluation of
//! the forgetting bounds on stored checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_lowest, ActivationTrace, Backbone};
use crate::error::{Error, Result};
use crate::numerics::{dot, eigh_sym, norm, Matrix};
use crate::relation::{relation_drift, relation_matrix, weyl_check, Phi, RelationMatrix};
use crate::stream::TaskData;

/// Relative slack granted by every bound record.
pub const BOUND_TOL: f64 = 1e-6;
/// Samples whose `λ_min(R_{s,s})` falls below this are excluded from relation bounds.
pub const LAMBDA_MIN_FLOOR: f64 = 1e-8;
/// Tolerance for the residual-expansion identity.
pub const IDENTITY_TOL: f64 = 1e-8;

/// Lower-triangular `a_{i,j}`, `1 ≤ j ≤ i ≤ T`, stored by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::contract(format!(
                    "accuracy row {} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    i + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::contract(format!("accuracy {v} outside [0, 1]")));
            }
        }
        Ok(Self { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// `a_{i,j}` with 1-based indices.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows
            .get(i.checked_sub(1)?)?
            .get(j.checked_sub(1)?)
            .copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let mut rows = std::mem::take(&mut self.rows);
        rows.push(row);
        match Self::from_rows(rows) {
            Ok(m) => {
                *self = m;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    pub fn empty() -> Self {
        Self { rows: Vec::new() }
    }

    /// `ℰ_s(W_t) = 1 − a_{t,s}` table.
    pub fn errors(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|a| 1.0 - a).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `𝒜_i` for `i = 1..=T`.
    pub average_after: Vec<f64>,
    pub last: f64,
    pub average: f64,
}

pub fn summarize(acc: &AccuracyMatrix) -> Result<Summary> {
    let t = acc.tasks();
    if t == 0 {
        return Err(Error::contract("accuracy matrix is empty"));
    }
    let average_after: Vec<f64> = acc
        .rows()
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let last = average_after[t - 1];
    let average = average_after.iter().sum::<f64>() / t as f64;
    Ok(Summary {
        average_after,
        last,
        average,
    })
}

/// `ℱ_t = (1/(t−1)) Σ_{s<t} (ℰ_s(W_t) − ℰ_s(W_s))` from `errors[t-1][s-1] = ℰ_s(W_t)`;
/// entry `t-1` is `None` for `t = 1`.
pub fn forgetting(errors: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    for (i, row) in errors.iter().enumerate() {
        if row.len() < i + 1 {
            return Err(Error::contract(format!(
                "missing errors for checkpoint {}",
                i + 1
            )));
        }
    }
    Ok(errors
        .iter()
        .enumerate()
        .map(|(i, row)| {
            (i > 0).then(|| (0..i).map(|s| row[s] - errors[s][s]).sum::<f64>() / i as f64)
        })
        .collect())
}

/// `(zᴸ)ᵀw_y − max_{k≠y}(zᴸ)ᵀw_k` from the trace's logits.
pub fn margin(trace: &ActivationTrace, label: usize) -> Result<f64> {
    if trace.classes.len() < 2 {
        return Err(Error::contract("margin needs at least two classes"));
    }
    let y = trace
        .classes
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| Error::contract(format!("label {label} not among the trace's classes")))?;
    let other = trace
        .logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(trace.logits[y] - other)
}

/// Highest-scoring class other than `label`, ties to the lowest id.
pub fn runner_up(trace: &ActivationTrace, label: usize) -> Option<usize> {
    let (ids, scores): (Vec<usize>, Vec<f64>) = trace
        .classes
        .iter()
        .zip(&trace.logits)
        .filter(|(&c, _)| c != label)
        .map(|(&c, &s)| (c, s))
        .unzip();
    argmax_lowest(&ids, &scores)
}

/// Largest singular value of the matrix whose rows are `heads`.
pub fn spectral_norm(heads: &[&[f64]]) -> Result<f64> {
    let Some(first) = heads.first() else {
        return Ok(0.0);
    };
    let d = first.len();
    let mut gram = Matrix::zeros(d, d);
    for h in heads {
        gram.add_outer(1.0, h, h);
    }
    let spec = eigh_sym(&gram)?;
    Ok(spec.values[0].max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub name: String,
    pub s: Option<usize>,
    pub t: usize,
    pub lhs: f64,
    /// `None` when the bound is unbounded or undefined.
    pub rhs: Option<f64>,
    pub holds: bool,
    pub samples: usize,
    /// Excluded from hold statistics, with `note` giving the reason.
    pub excluded: bool,
    pub note: String,
}

impl BoundRecord {
    fn bounded(name: &str, s: Option<usize>, t: usize, lhs: f64, rhs: f64, samples: usize) -> Self {
        Self {
            name: name.to_owned(),
            s,
            t,
            lhs,
            rhs: Some(rhs),
            holds: bound_holds(lhs, rhs),
            samples,
            excluded: false,
            note: String::new(),
        }
    }

    fn skipped(
        name: &str,
        s: Option<usize>,
        t: usize,
        samples: usize,
        note: impl Into<String>,
    ) -> Self {
        Self {
            name: name.to_owned(),
            s,
            t,
            lhs: 0.0,
            rhs: None,
            holds: true,
            samples,
            excluded: true,
            note: note.into(),
        }
    }
}

/// `lhs ≤ rhs + 1e-6·max(1, |rhs|)`
pub fn bound_holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + BOUND_TOL * rhs.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BoundReport {
    pub records: Vec<BoundRecord>,
}

impl BoundReport {
    pub fn counted(&self) -> impl Iterator<Item = &BoundRecord> {
        self.records.iter().filter(|r| !r.excluded)
    }

    pub fn violations(&self) -> Vec<&BoundRecord> {
        self.counted().filter(|r| !r.holds).collect()
    }

    pub fn by_name<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a BoundRecord> + 'a {
        self.records.iter().filter(move |r| r.name == name)
    }

    /// One tab-separated line per record: name, s, t, lhs, rhs, holds, samples, note.
    pub fn to_text(&self) -> String {
        let mut out = String::from("name\ts\tt\tlhs\trhs\tholds\tsamples\tnote\n");
        for r in &self.records {
            let s = r.s.map_or_else(|| "-".to_owned(), |s| s.to_string());
            let rhs = r
                .rhs
                .map_or_else(|| "unbounded".to_owned(), |v| format!("{v:.16e}"));
            let holds = if r.excluded {
                "excluded"
            } else if r.holds {
                "true"
            } else {
                "false"
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.16e}\t{}\t{}\t{}\t{}",
                r.name, s, r.t, r.lhs, rhs, holds, r.samples, r.note
            );
        }
        out
    }
}

/// Per-sample quantities comparing horizons `s` and `t` under one classifier.
struct PairSample {
    correct_s: bool,
    correct_t: bool,
    margin_s: f64,
    margin_t: f64,
    head_gap: f64,
    sum_dh_norm: f64,
    sq_norms: f64,
    cross_signed: f64,
    cross_abs: f64,
    drift_sq: f64,
    lambda_min: f64,
    r_ss: RelationMatrix,
    r_st: RelationMatrix,
}

fn pair_sample(
    trace_s: &ActivationTrace,
    trace_t: &ActivationTrace,
    label: usize,
    heads: &BTreeMap<usize, Vec<f64>>,
) -> Result<PairSample> {
    let big_l = trace_s.layers();
    let layers: Vec<usize> = (1..=big_l).collect();
    let dh: Vec<Vec<f64>> = (1..=big_l)
        .map(|l| {
            trace_t
                .residual(l)
                .iter()
                .zip(trace_s.residual(l))
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let d = dh[0].len();
    let sum: Vec<f64> = (0..d).map(|i| dh.iter().map(|v| v[i]).sum()).collect();
    let sq_norms: f64 = dh.iter().map(|v| dot(v, v)).sum();
    let mut cross_signed = 0.0;
    let mut cross_abs = 0.0;
    for a in 0..big_l {
        for b in a + 1..big_l {
            let c = dot(&dh[a], &dh[b]);
            cross_signed += c;
            cross_abs += c.abs();
        }
    }
    let k_star =
        runner_up(trace_t, label).ok_or_else(|| Error::contract("margin needs two classes"))?;
    let head_gap = norm(
        &heads[&label]
            .iter()
            .zip(&heads[&k_star])
            .map(|(a, b)| a - b)
            .collect::<Vec<f64>>(),
    );
    let r_ss = relation_matrix(trace_s, Phi::Inner, &layers)?;
    let r_st = relation_matrix(trace_t, Phi::Inner, &layers)?;
    let drift = relation_drift(&r_st, &r_ss)?;
    let lambda_min = *eigh_sym(&r_ss.entries)?.values.last().expect("non-empty");
    Ok(PairSample {
        correct_s: trace_s.predicted() == Some(label),
        correct_t: trace_t.predicted() == Some(label),
        margin_s: margin(trace_s, label)?,
        margin_t: margin(trace_t, label)?,
        head_gap,
        sum_dh_norm: norm(&sum),
        sq_norms,
        cross_signed,
        cross_abs,
        drift_sq: drift * drift,
        lambda_min,
        r_ss,
        r_st,
    })
}

/// Aggregates over one `(s, t)` pair that the theorem records reuse.
struct PairTerms {
    error_increase: f64,
    gamma_min: Option<f64>,
    residual_mean: f64,
    relation_mean: Option<f64>,
}

/// Relative error of the residual-expansion identity for one sample.
pub fn residual_identity_error(
    sum_norm: f64,
    sq_norms: f64,
    cross_signed: f64,
    cross_abs: f64,
) -> f64 {
    let denom = sq_norms + 2.0 * cross_abs;
    if denom == 0.0 {
        return (sum_norm * sum_norm).abs();
    }
    (sum_norm * sum_norm - sq_norms - 2.0 * cross_signed).abs() / denom
}

/// Evaluates the margin, residual-deviation and relation-drift bounds, the
/// residual-expansion identity and the Weyl bound on the test sets of `tasks`.
///
/// `heads[t-1]` holds the classifier after task `t`. Both horizons of a pair
/// `(s, t)` are scored with that later classifier over `𝒞_t`, and relation
/// matrices use raw inner products over all layers.
pub fn theory_report(
    backbone: &Backbone,
    heads: &[BTreeMap<usize, Vec<f64>>],
    tasks: &[TaskData],
) -> Result<BoundReport> {
    let big_t = heads.len();
    if big_t > tasks.len() || big_t > backbone.newest_task() {
        return Err(Error::contract(format!(
            "{big_t} checkpoints for {} tasks and {} adapters",
            tasks.len(),
            backbone.newest_task()
        )));
    }
    let big_l = backbone.layers() as f64;
    let weights: Vec<Vec<Matrix>> = (0..=big_t)
        .map(|h| backbone.effective_weights(h))
        .collect::<Result<_>>()?;
    let mut report = BoundReport::default();
    for t in 1..=big_t {
        let snapshot = &heads[t - 1];
        let classes: Vec<usize> = snapshot.keys().copied().collect();
        let mut model = backbone.clone();
        model.replace_heads(snapshot.clone());
        let mut terms: Vec<PairTerms> = Vec::new();
        for s in 1..=t {
            let test = &tasks[s - 1].test;
            if let Some(bad) = test.iter().find(|x| !snapshot.contains_key(&x.y)) {
                return Err(Error::contract(format!(
                    "checkpoint {t} has no head for class {}",
                    bad.y
                )));
            }
            let samples: Vec<PairSample> = test
                .iter()
                .map(|x| {
                    let ts = model.forward_with(&weights[s], &x.x, &classes, s)?;
                    let tt = model.forward_with(&weights[t], &x.x, &classes, t)?;
                    pair_sample(&ts, &tt, x.y, snapshot)
                })
                .collect::<Result<_>>()?;
            let n = samples.len();
            if n == 0 {
                continue;
            }
            let nf = n as f64;
            let err_s = samples.iter().filter(|p| !p.correct_s).count() as f64 / nf;
            let err_t = samples.iter().filter(|p| !p.correct_t).count() as f64 / nf;
            let gamma_min = samples
                .iter()
                .filter(|p| p.margin_s > 0.0)
                .map(|p| p.margin_s)
                .reduce(f64::min);

            match gamma_min {
                Some(g) => {
                    let drop = samples.iter().map(|p| p.margin_s - p.margin_t).sum::<f64>() / nf;
                    report.records.push(BoundRecord::bounded(
                        "lemma1",
                        Some(s),
                        t,
                        err_t - err_s,
                        drop / g,
                        n,
                    ));
                }
                None => report.records.push(BoundRecord::skipped(
                    "lemma1",
                    Some(s),
                    t,
                    n,
                    "no correctly classified samples under the earlier horizon",
                )),
            }

            let worst = samples
                .iter()
                .map(|p| (p.margin_s - p.margin_t, p.head_gap * p.sum_dh_norm))
                .max_by(|a, b| (a.0 - a.1).total_cmp(&(b.0 - b.1)))
                .expect("n > 0");
            let mut r = BoundRecord::bounded("lemma2", Some(s), t, worst.0, worst.1, n);
            r.note = "worst sample".into();
            report.records.push(r);

            let identity = samples
                .iter()
                .map(|p| {
                    residual_identity_error(p.sum_dh_norm, p.sq_norms, p.cross_signed, p.cross_abs)
                })
                .fold(0.0, f64::max);
            let mut r =
                BoundRecord::bounded("residual_identity", Some(s), t, identity, IDENTITY_TOL, n);
            r.holds = identity < IDENTITY_TOL;
            r.note = "max relative error".into();
            report.records.push(r);

            let usable: Vec<&PairSample> = samples
                .iter()
                .filter(|p| p.lambda_min >= LAMBDA_MIN_FLOOR)
                .collect();
            let excluded = n - usable.len();
            let lemma3 = usable
                .iter()
                .map(|p| (p.cross_abs, 8.0 * (big_l - 1.0) / p.lambda_min * p.drift_sq))
                .max_by(|a, b| (a.0 - a.1).total_cmp(&(b.0 - b.1)));
            match lemma3 {
                Some((lhs, rhs)) => {
                    let mut r = BoundRecord::bounded("lemma3", Some(s), t, lhs, rhs, usable.len());
                    r.note = format!("worst sample; {excluded} excluded for lambda_min < 1e-8");
                    report.records.push(r);
                }
                None => report.records.push(BoundRecord::skipped(
                    "lemma3",
                    Some(s),
                    t,
                    0,
                    "every sample has lambda_min < 1e-8",
                )),
            }

            let mut weyl_worst: Option<(f64, f64)> = None;
            let mut weyl_ok = true;
            for p in &samples {
                let e = p.r_st.entries.sub(&p.r_ss.entries)?;
                let w = weyl_check(&p.r_ss.entries, &e)?;
                weyl_ok &= w.holds;
                if weyl_worst.is_none_or(|(g, n)| w.max_gap - w.perturbation_norm > g - n) {
                    weyl_worst = Some((w.max_gap, w.perturbation_norm));
                }
            }
            let (gap, pert) = weyl_worst.expect("n > 0");
            let mut r = BoundRecord::bounded("weyl", Some(s), t, gap, pert, n);
            r.holds = weyl_ok;
            r.note = "worst sample".into();
            report.records.push(r);

            if s < t {
                let residual_mean = samples
                    .iter()
                    .map(|p| (p.sq_norms + 2.0 * p.cross_signed).max(0.0).sqrt())
                    .sum::<f64>()
                    / nf;
                let relation_mean = (excluded == 0).then(|| {
                    samples
                        .iter()
                        .map(|p| {
                            (p.sq_norms + 16.0 * (big_l - 1.0) / p.lambda_min * p.drift_sq).sqrt()
                        })
                        .sum::<f64>()
                        / nf
                });
                terms.push(PairTerms {
                    error_increase: err_t - err_s,
                    gamma_min,
                    residual_mean,
                    relation_mean,
                });
            }
        }

        if t >= 2 && !terms.is_empty() {
            let rows: Vec<&[f64]> = snapshot.values().map(Vec::as_slice).collect();
            let w_norm = spectral_norm(&rows)?;
            let k = terms.len() as f64;
            let lhs = terms.iter().map(|p| p.error_increase).sum::<f64>() / k;
            if terms.iter().any(|p| p.gamma_min.is_none()) {
                for name in ["theorem1", "theorem2"] {
                    report.records.push(BoundRecord::skipped(
                        name,
                        None,
                        t,
                        terms.len(),
                        "an earlier task has no correctly classified samples",
                    ));
                }
                continue;
            }
            let rhs1 = w_norm / k
                * terms
                    .iter()
                    .map(|p| p.residual_mean / p.gamma_min.expect("checked"))
                    .sum::<f64>();
            report.records.push(BoundRecord::bounded(
                "theorem1",
                None,
                t,
                lhs,
                rhs1,
                terms.len(),
            ));
            if terms.iter().any(|p| p.relation_mean.is_none()) {
                report.records.push(BoundRecord::skipped(
                    "theorem2",
                    None,
                    t,
                    terms.len(),
                    "a sample has lambda_min < 1e-8",
                ));
            } else {
                let rhs2 = w_norm / k
                    * terms
                        .iter()
                        .map(|p| p.relation_mean.expect("checked") / p.gamma_min.expect("checked"))
                        .sum::<f64>();
                report.records.push(BoundRecord::bounded(
                    "theorem2",
                    None,
                    t,
                    lhs,
                    rhs2,
                    terms.len(),
                ));
            }
        }
    }
    Ok(report)
}
