//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Every relation matrix in this crate is symmetric, so its singular values are
//! the absolute eigenvalues and its singular vectors are the eigenvectors. The
//! Jacobi method gives eigenvectors orthonormal to machine precision, which the
//! singular-value gradient `∂σᵢ/∂R = sᵢ vᵢ vᵢᵀ` relies on.

use serde::{Deserialize, Serialize};

use super::matrix::{frobenius_norm, Matrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal convergence threshold, relative to the input's Frobenius norm.
pub const CONVERGENCE_TOL: f64 = 1e-12;
/// Relative asymmetry accepted on input.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues closer than this are reported as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-10;

/// Eigenvalues in non-increasing order with the matching orthonormal eigenvectors
/// stored as the columns of `vectors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: Matrix,
    pub sweeps: usize,
}

impl Spectrum {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors.column(i)
    }

    /// Smallest gap between consecutive eigenvalues (`∞` for 1×1).
    pub fn min_gap(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| (w[0] - w[1]).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn degenerate_pairs(&self) -> usize {
        self.values
            .windows(2)
            .filter(|w| (w[0] - w[1]).abs() < DEGENERACY_GAP)
            .count()
    }

    /// `V · diag(values) · Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * self.values[k] * self.vectors[(j, k)])
                .sum()
        })
    }
}

/// One singular triplet of a symmetric matrix: `σ = |λ|`, `sign = sgn(λ)` and
/// the shared left/right vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub value: f64,
    pub sign: f64,
    pub vector: Vec<f64>,
}

pub fn eigh_sym(m: &Matrix) -> Result<Spectrum> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "eigh_sym needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::numerical("eigh_sym", "input has non-finite entries"));
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::contract("eigh_sym input is not symmetric"));
    }

    let n = m.rows();
    // symmetrize away the tolerated rounding asymmetry
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = Matrix::identity(n);
    let threshold = CONVERGENCE_TOL * frobenius_norm(m);

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= threshold {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep the solver's column order
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));

    let values: Vec<f64> = order.iter().map(|&k| a[(k, k)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        canonical_sign(&mut col);
        for (i, c) in col.into_iter().enumerate() {
            vectors[(i, dst)] = c;
        }
    }
    Ok(Spectrum {
        values,
        vectors,
        sweeps,
    })
}

/// Absolute eigenvalues of a symmetric matrix, sorted non-increasing.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(singular_triplets(m)?.into_iter().map(|t| t.value).collect())
}

/// Singular triplets of a symmetric matrix ordered by descending `σ`.
pub fn singular_triplets(m: &Matrix) -> Result<Vec<SingularTriplet>> {
    let spec = eigh_sym(m)?;
    let mut out: Vec<SingularTriplet> = spec
        .values
        .iter()
        .enumerate()
        .map(|(k, &lam)| SingularTriplet {
            value: lam.abs(),
            sign: if lam < 0.0 { -1.0 } else { 1.0 },
            vector: spec.vector(k),
        })
        .collect();
    out.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(out)
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Annihilates `a[p][q]` with `A ← JᵀAJ`, accumulating `V ← VJ`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let n = a.rows();

    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Flips `v` so its largest-magnitude component (lowest index on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs * (1.0 + 1e-12) {
            best = i;
            best_abs = x.abs();
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
