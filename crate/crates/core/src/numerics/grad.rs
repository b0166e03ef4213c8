use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Central-difference step used by the gradient contract.
pub const FD_STEP: f64 = 1e-4;
/// Maximum componentwise relative error accepted by the gradient contract.
pub const FD_REL_TOL: f64 = 1e-5;
/// Components with both magnitudes below this are not compared.
pub const FD_MIN_MAGNITUDE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// A scalar function of a flat parameter vector with an analytic gradient.
///
/// `value` and `value_and_grad` must run the same forward computation so that
/// `value_and_grad(p).value == value(p)` holds bitwise.
pub trait Objective {
    fn param_count(&self) -> usize;

    fn value(&self, params: &[f64]) -> Result<f64>;

    fn value_and_grad(&self, params: &[f64]) -> Result<GradRecord>;
}

/// Evaluates `objective` with its gradient and enforces the record invariants.
pub fn value_and_grad(objective: &dyn Objective, params: &[f64]) -> Result<GradRecord> {
    let n = objective.param_count();
    if params.len() != n {
        return Err(Error::contract(format!(
            "objective declares {n} parameters, got {}",
            params.len()
        )));
    }
    let rec = objective.value_and_grad(params)?;
    if rec.gradient.len() != n {
        return Err(Error::contract(format!(
            "gradient has {} entries for {n} parameters",
            rec.gradient.len()
        )));
    }
    if !rec.value.is_finite() {
        return Err(Error::numerical(
            "objective value",
            format!("{}", rec.value),
        ));
    }
    if let Some(i) = rec.gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(
            "objective gradient",
            format!("component {i} is {}", rec.gradient[i]),
        ));
    }
    Ok(rec)
}

pub fn central_differences(
    objective: &dyn Objective,
    params: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = objective.value(&p)?;
        p[i] = orig - step;
        let down = objective.value(&p)?;
        p[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Whether central differences at [`FD_STEP`] are a trustworthy oracle at
/// `params`: the Richardson estimate `4/3·|D(h) − D(h/2)|` of their truncation
/// error stays below a quarter of [`FD_REL_TOL`] on every compared component.
/// Uses objective values only.
pub fn differences_resolved(objective: &dyn Objective, params: &[f64]) -> Result<bool> {
    let full = central_differences(objective, params, FD_STEP)?;
    let half = central_differences(objective, params, FD_STEP / 2.0)?;
    Ok(full.iter().zip(&half).all(|(&f, &h)| {
        let scale = f.abs().max(h.abs());
        scale <= FD_MIN_MAGNITUDE || 4.0 / 3.0 * (f - h).abs() < 0.25 * FD_REL_TOL * scale
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub worst_rel_error: f64,
    pub worst_index: Option<usize>,
    pub compared: usize,
    /// Indices whose relative error exceeded the tolerance.
    pub offending: Vec<usize>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.offending.is_empty()
    }
}

pub fn compare_gradients(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    min_magnitude: f64,
) -> GradCheck {
    let mut worst = 0.0;
    let mut worst_index = None;
    let mut compared = 0;
    let mut offending = Vec::new();
    for (i, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(f.abs());
        if scale <= min_magnitude {
            continue;
        }
        compared += 1;
        let rel = (a - f).abs() / scale;
        if rel > worst {
            worst = rel;
            worst_index = Some(i);
        }
        if !(rel < rel_tol) {
            offending.push(i);
        }
    }
    GradCheck {
        worst_rel_error: worst,
        worst_index,
        compared,
        offending,
    }
}

/// Compares the analytic gradient against central differences at the contract's
/// step and tolerance.
pub fn check_gradient(objective: &dyn Objective, params: &[f64]) -> Result<GradCheck> {
    let rec = value_and_grad(objective, params)?;
    let fd = central_differences(objective, params, FD_STEP)?;
    Ok(compare_gradients(
        &rec.gradient,
        &fd,
        FD_REL_TOL,
        FD_MIN_MAGNITUDE,
    ))
}
