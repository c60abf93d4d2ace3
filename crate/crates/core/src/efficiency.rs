//! Asymptotic covariance of the LMM estimator and the matching Cramér-Rao bound.
//!
//! All quantities are under `n^{1/4}` normalization: divide by `√n` for finite-sample variances.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mattensor::{kron, psd_sqrt, vec_index, weighted_sqrt, z_matrix, SymMat, TensorMat};

/// Quadrature node count for callable paths.
pub const DEFAULT_NODES: usize = 512;

type PathFn = dyn Fn(f64) -> (SymMat, Vec<f64>) + Send + Sync;

/// `t ↦ (Σ(t), diag ℋ(t))` on [0, 1].
#[derive(Clone)]
pub enum PathSpec {
    /// Constant on `[breaks[i], breaks[i+1])`; integrated exactly.
    PiecewiseConstant {
        breaks: Vec<f64>,
        sigma: Vec<SymMat>,
        noise: Vec<Vec<f64>>,
    },
    /// Integrated by the composite midpoint rule on `nodes` equal cells.
    Callable { f: Arc<PathFn>, nodes: usize },
}

impl std::fmt::Debug for PathSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PathSpec::PiecewiseConstant { breaks, .. } => {
                write!(
                    f,
                    "PiecewiseConstant({} pieces)",
                    breaks.len().saturating_sub(1)
                )
            }
            PathSpec::Callable { nodes, .. } => write!(f, "Callable({nodes} nodes)"),
        }
    }
}

impl PathSpec {
    pub fn constant(sigma: SymMat, noise: Vec<f64>) -> Self {
        PathSpec::PiecewiseConstant {
            breaks: vec![0.0, 1.0],
            sigma: vec![sigma],
            noise: vec![noise],
        }
    }

    pub fn piecewise(breaks: Vec<f64>, sigma: Vec<SymMat>, noise: Vec<Vec<f64>>) -> Result<Self> {
        if breaks.len() != sigma.len() + 1 || sigma.len() != noise.len() || sigma.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: sigma.len() + 1,
                got: breaks.len(),
            });
        }
        let ordered = breaks.windows(2).all(|w| w[1] > w[0]);
        if !ordered || breaks[0] != 0.0 || breaks[breaks.len() - 1] != 1.0 {
            return Err(Error::InvalidArgument(
                "breaks must increase from 0 to 1".into(),
            ));
        }
        Ok(PathSpec::PiecewiseConstant {
            breaks,
            sigma,
            noise,
        })
    }

    pub fn callable(
        f: impl Fn(f64) -> (SymMat, Vec<f64>) + Send + Sync + 'static,
        nodes: usize,
    ) -> Self {
        PathSpec::Callable {
            f: Arc::new(f),
            nodes: nodes.max(1),
        }
    }

    /// Quadrature weights and the path value at each node.
    fn nodes(&self) -> Vec<(f64, f64, SymMat, Vec<f64>)> {
        match self {
            PathSpec::PiecewiseConstant {
                breaks,
                sigma,
                noise,
            } => breaks
                .windows(2)
                .zip(sigma.iter().zip(noise))
                .map(|(w, (s, n))| (0.5 * (w[0] + w[1]), w[1] - w[0], s.clone(), n.clone()))
                .collect(),
            PathSpec::Callable { f, nodes } => (0..*nodes)
                .map(|i| {
                    let t = (i as f64 + 0.5) / *nodes as f64;
                    let (s, n) = f(t);
                    (t, 1.0 / *nodes as f64, s, n)
                })
                .collect(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            PathSpec::PiecewiseConstant { sigma, .. } => sigma[0].dim(),
            PathSpec::Callable { f, .. } => f(0.5).0.dim(),
        }
    }
}

fn finite_or(t: f64, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::QuadratureFailure(t))
    }
}

/// `𝐈⁻¹ = 2∫(Σ⊗Σ_ℋ^{1/2} + Σ_ℋ^{1/2}⊗Σ)dt`.
pub fn asymptotic_info_inv(path: &PathSpec) -> Result<TensorMat> {
    let d = path.dim();
    let mut acc = DMatrix::zeros(d * d, d * d);
    for (t, w, sigma, noise) in path.nodes() {
        finite_or(t, sigma.as_matrix())?;
        let root = weighted_sqrt(&sigma, &noise)?;
        let (s, r) = (sigma.as_matrix(), root.as_matrix());
        let term = kron(s, r)?.into_matrix() + kron(r, s)?.into_matrix();
        finite_or(t, &term)?;
        acc += term * (2.0 * w);
    }
    TensorMat::new(d, acc)
}

/// `𝐈⁻¹𝒵`, the asymptotic covariance of `n^{1/4}·vec(LMM − ∫Σ)`.
pub fn asymptotic_cov(path: &PathSpec) -> Result<TensorMat> {
    let inv = asymptotic_info_inv(path)?;
    Ok(inv.mul(&z_matrix(inv.dim())))
}

/// Asymptotic variance of entry `(p, q)` of the estimate.
pub fn avar_entry(path: &PathSpec, p: usize, q: usize) -> Result<f64> {
    let d = path.dim();
    if p >= d || q >= d {
        return Err(Error::IndexOutOfRange { p, q, d });
    }
    let i = vec_index(p, q, d);
    Ok(asymptotic_cov(path)?.as_matrix()[(i, i)])
}

/// `4η∫(tr Σ^{1/2}·tr Σ + tr Σ^{3/2})` for homogeneous noise `ℋ = ηI`: the sum of all entry
/// variances, i.e. √n times the Hilbert-Schmidt risk.
pub fn hs_risk(path: &PathSpec) -> Result<f64> {
    let mut total = 0.0;
    let mut eta: Option<f64> = None;
    for (t, w, sigma, noise) in path.nodes() {
        finite_or(t, sigma.as_matrix())?;
        let e = noise[0];
        if noise.iter().any(|&n| (n - e).abs() > 1e-12 * e.abs()) {
            return Err(Error::InhomogeneousNoise);
        }
        match eta {
            Some(prev) if (prev - e).abs() > 1e-12 * prev.abs() => {
                return Err(Error::InhomogeneousNoise)
            }
            _ => eta = Some(e),
        }
        let root = psd_sqrt(&sigma)?;
        let v = root.trace() * sigma.trace() + (root.as_matrix() * sigma.as_matrix()).trace();
        if !v.is_finite() {
            return Err(Error::QuadratureFailure(t));
        }
        total += w * v;
    }
    Ok(4.0 * eta.unwrap_or(0.0) * total)
}

/// `4∫⟨A, ΣAΣ_ℋ^{1/2} + Σ_ℋ^{1/2}AΣ⟩_HS dt` with `A` symmetrized pointwise.
pub fn cramer_rao(path: &PathSpec, a: &dyn Fn(f64) -> DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (t, w, sigma, noise) in path.nodes() {
        finite_or(t, sigma.as_matrix())?;
        let raw = a(t);
        let a_sym = (&raw + raw.transpose()) * 0.5;
        let root = weighted_sqrt(&sigma, &noise)?;
        let (s, r) = (sigma.as_matrix(), root.as_matrix());
        let inner = s * &a_sym * r + r * &a_sym * s;
        let v = a_sym.dot(&inner);
        if !v.is_finite() {
            return Err(Error::QuadratureFailure(t));
        }
        total += w * v;
    }
    Ok(4.0 * total)
}

/// Least favourable direction `Σ₀(A+Aᵀ)Σ₀^{1/2} + Σ₀^{1/2}(A+Aᵀ)Σ₀`.
pub fn worst_perturbation(sigma0: &SymMat, a: &DMatrix<f64>) -> Result<SymMat> {
    let min = sigma0.min_eigenvalue();
    if !(min > 0.0) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let root = psd_sqrt(sigma0)?;
    let b = a + a.transpose();
    let (s, r) = (sigma0.as_matrix(), root.as_matrix());
    Ok(SymMat::symmetrize(&(s * &b * r + r * &b * s)))
}

/// One cell of the two-asset efficiency table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvarRow {
    pub rho: f64,
    pub eta2: f64,
    pub var_11: f64,
    pub var_12: f64,
    pub var_22: f64,
}

/// Asymptotic variances for unit volatilities, correlation `ρ`, noise levels `η₁ = 1` and `η₂`.
pub fn avar_grid(rhos: &[f64], eta2s: &[f64]) -> Result<Vec<AvarRow>> {
    let mut rows = Vec::with_capacity(rhos.len() * eta2s.len());
    for &rho in rhos {
        for &eta2 in eta2s {
            let path = PathSpec::constant(SymMat::equicorrelated(2, 1.0, rho), vec![1.0, eta2]);
            let cov = asymptotic_cov(&path)?;
            let m = cov.as_matrix();
            let at = |p, q| {
                let i = vec_index(p, q, 2);
                m[(i, i)]
            };
            rows.push(AvarRow {
                rho,
                eta2,
                var_11: at(0, 0),
                var_12: at(0, 1),
                var_22: at(1, 1),
            });
        }
    }
    Ok(rows)
}
