//! Closed-form frequency sums of the diagonalized information.
//!
//! After the block transformation `A = Oᵀ…` that turns `H⁻¹ΣH⁻¹` into `Λ = diag(λ)`, every
//! `C̃_j = Λ + π²j²h⁻²·I` is diagonal and the entry of `hĨ_k⁻¹` at index pair (p, q) is the
//! reciprocal of `h⁻¹ Σ_{j≥1} (λ_p + π²j²h⁻²)⁻¹ (λ_q + π²j²h⁻²)⁻¹`, which sums in terms of
//! `coth`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mattensor::{kron, vec_index, SymMat, TensorMat};

/// Relative eigenvalue gap below which the equal-eigenvalue limit is used.
pub const EQUAL_BRANCH_GAP: f64 = 1e-6;

/// Below this `h·√λ` the sum is evaluated through its power series in `λ`.
const SERIES_THRESHOLD: f64 = 1.0;

/// `Σ_j (λ + c j²)⁻¹ = (x·coth x − 1)/(2λ)` with `x = h√λ`, `c = π²/h²`.
fn single_sum(lambda: f64, h: f64) -> f64 {
    let x = h * lambda.sqrt();
    (x / x.tanh() - 1.0) / (2.0 * lambda)
}

/// `Σ_j (λ + c j²)⁻²`, the equal-eigenvalue limit of the paired sum.
fn squared_sum(lambda: f64, h: f64) -> f64 {
    let x = h * lambda.sqrt();
    let csch = 1.0 / x.sinh();
    (x / x.tanh() + x * x * csch * csch - 2.0) / (4.0 * lambda * lambda)
}

fn zeta_even(s: u32) -> f64 {
    match s {
        4 => PI.powi(4) / 90.0,
        6 => PI.powi(6) / 945.0,
        8 => PI.powi(8) / 9450.0,
        10 => PI.powi(10) / 93555.0,
        _ => (1..=40).rev().map(|k| (k as f64).powi(-(s as i32))).sum(),
    }
}

/// Power series `c⁻² Σ_m (−1)^m h_m(λ_p, λ_q) ζ(4+2m) c^{−m}` with `h_m` the complete
/// homogeneous symmetric polynomial; converges for `λ < c`.
fn series_sum(lp: f64, lq: f64, h: f64) -> f64 {
    let c = (PI / h).powi(2);
    let (a, b) = (lp / c, lq / c);
    let mut total = 0.0;
    for m in 0..40u32 {
        let hm: f64 = (0..=m)
            .map(|i| a.powi(i as i32) * b.powi((m - i) as i32))
            .sum();
        let term = hm * zeta_even(4 + 2 * m);
        total += if m % 2 == 0 { term } else { -term };
        if term < 1e-18 * total.abs() {
            break;
        }
    }
    total / (c * c)
}

/// `Σ_{j≥1} (λ_p + π²j²h⁻²)⁻¹ (λ_q + π²j²h⁻²)⁻¹` in closed form.
pub fn paired_frequency_sum(lp: f64, lq: f64, h: f64) -> Result<f64> {
    for l in [lp, lq] {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::NonpositiveLambda(l));
        }
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "block length {h} must be positive"
        )));
    }
    if h * lp.max(lq).sqrt() < SERIES_THRESHOLD {
        return Ok(series_sum(lp, lq, h));
    }
    if (lp - lq).abs() <= EQUAL_BRANCH_GAP * (lp + lq) {
        // the central difference quotient equals −f' at the midpoint up to O(gap²)
        return Ok(squared_sum(0.5 * (lp + lq), h));
    }
    Ok((single_sum(lp, h) - single_sum(lq, h)) / (lq - lp))
}

/// Entry `(hĨ_k⁻¹)_{p,q}` for eigenvalues `λ_p, λ_q`.
pub fn closed_form_entry(lp: f64, lq: f64, h: f64) -> Result<f64> {
    Ok(h / paired_frequency_sum(lp, lq, h)?)
}

/// `hĨ_k⁻¹` as a diagonal d²×d² tensor; index pair (p, q) sits at `vec_index(p, q)`.
pub fn closed_form_hik_inv(lambda: &[f64], h: f64) -> Result<TensorMat> {
    let d = lambda.len();
    let mut diag = vec![0.0; d * d];
    for p in 0..d {
        for q in 0..d {
            diag[vec_index(p, q, d)] = closed_form_entry(lambda[p], lambda[q], h)?;
        }
    }
    TensorMat::from_diagonal(d, &diag)
}

/// The untruncated information `I_k = Σ_{j≥1} C_jk⁻¹⊗C_jk⁻¹` for `C_jk = Σ + π²j²h⁻²·H²`.
///
/// Requires strictly positive noise levels; `sigma` should already be eigenvalue-floored.
pub fn full_info_k(sigma: &SymMat, noise_sq: &[f64], h: f64) -> Result<TensorMat> {
    let d = sigma.dim();
    if noise_sq.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: noise_sq.len(),
        });
    }
    if let Some(&bad) = noise_sq.iter().find(|&&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::NonpositiveNoiseLevel(bad));
    }
    let hinv: Vec<f64> = noise_sq.iter().map(|n| 1.0 / n.sqrt()).collect();
    let s = sigma.as_matrix();
    let scaled = SymMat::symmetrize(&DMatrix::from_fn(d, d, |p, q| {
        hinv[p] * s[(p, q)] * hinv[q]
    }));
    let (lambda, u) = scaled.eigen();
    // A = Uᵀ H⁻¹ diagonalizes both Σ and the noise
    let a = DMatrix::from_fn(d, d, |p, q| u[(q, p)] * hinv[q]);
    let lam: Vec<f64> = lambda.iter().copied().collect();
    let tilde = closed_form_hik_inv(&lam, h)?;
    let tilde_info: Vec<f64> = tilde.as_matrix().diagonal().iter().map(|e| h / e).collect();
    let aa = kron(&a, &a)?;
    let info = aa.transpose().as_matrix()
        * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(tilde_info))
        * aa.as_matrix();
    TensorMat::new(d, (&info + info.transpose()) * 0.5)
}
