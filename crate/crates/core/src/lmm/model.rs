use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{BlockGrid, LocalNoise};
use crate::mattensor::{default_floor, floor_eigenvalues, kron, SymMat, TensorMat};

/// Block-constant spot covolatility `Σ^{kh}` and squared noise levels `(H^{kh}_l)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    sigma: Vec<SymMat>,
    noise_sq: Vec<Vec<f64>>,
}

impl LocalModel {
    pub fn new(sigma: Vec<SymMat>, noise_sq: Vec<Vec<f64>>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::InvalidArgument(
                "local model needs at least one block".into(),
            ));
        }
        if sigma.len() != noise_sq.len() {
            return Err(Error::DimensionMismatch {
                expected: sigma.len(),
                got: noise_sq.len(),
            });
        }
        let d = sigma[0].dim();
        for (s, n) in sigma.iter().zip(&noise_sq) {
            if s.dim() != d || n.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.dim().max(n.len()),
                });
            }
            if let Some(&bad) = n.iter().find(|&&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "squared noise level {bad} must be >= 0"
                )));
            }
        }
        Ok(LocalModel { sigma, noise_sq })
    }

    /// Same `Σ` and noise levels on every block.
    pub fn constant(sigma: SymMat, noise_sq: Vec<f64>, blocks: usize) -> Result<Self> {
        Self::new(vec![sigma; blocks], vec![noise_sq; blocks])
    }

    /// Per-block `Σ^{kh}` with noise levels taken from a [`LocalNoise`].
    pub fn with_noise(sigma: Vec<SymMat>, noise: &LocalNoise) -> Result<Self> {
        Self::new(sigma, noise.levels.clone())
    }

    pub fn blocks(&self) -> usize {
        self.sigma.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma[0].dim()
    }

    pub fn sigma(&self, k: usize) -> &SymMat {
        &self.sigma[k]
    }

    pub fn sigmas(&self) -> &[SymMat] {
        &self.sigma
    }

    pub fn noise_sq(&self, k: usize) -> &[f64] {
        &self.noise_sq[k]
    }

    /// `Σ^{kh}` with eigenvalues floored at `1e-8·trace + 1e-12`, as used for weights.
    pub fn weight_sigma(&self, k: usize) -> SymMat {
        let s = &self.sigma[k];
        floor_eigenvalues(s, default_floor(s))
    }

    pub fn check_grid(&self, grid: &BlockGrid) -> Result<()> {
        if self.blocks() != grid.blocks() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// `Σ + π²j²h⁻²·diag(noise_sq)`.
pub fn cjk_from(sigma: &SymMat, noise_sq: &[f64], j: usize, h: f64) -> SymMat {
    let scale = (PI * j as f64 / h).powi(2);
    let mut m = sigma.as_matrix().clone();
    for (l, n) in noise_sq.iter().enumerate() {
        m[(l, l)] += scale * n;
    }
    SymMat::symmetrize(&m)
}

/// Bias correction `π²j²h⁻²·diag(noise_sq)`.
pub fn bias_jk(noise_sq: &[f64], j: usize, h: f64) -> SymMat {
    let scale = (PI * j as f64 / h).powi(2);
    SymMat::from_diagonal(&noise_sq.iter().map(|n| scale * n).collect::<Vec<_>>())
}

/// Covariance `C_jk` of the spectral statistic at frequency `j` on block `k`.
pub fn cjk(model: &LocalModel, j: usize, k: usize, grid: &BlockGrid) -> SymMat {
    cjk_from(model.sigma(k), model.noise_sq(k), j, grid.h())
}

/// `C⁻¹⊗C⁻¹`.
pub fn info_jk(c: &SymMat) -> Result<TensorMat> {
    let inv = c.inverse()?;
    kron(inv.as_matrix(), inv.as_matrix())
}

/// `Σ_{j≤J} I_jk` for block `k`, using the floored `Σ^{kh}`.
pub fn info_k(model: &LocalModel, k: usize, grid: &BlockGrid) -> Result<TensorMat> {
    let sigma = model.weight_sigma(k);
    let mut total = TensorMat::zeros(model.dim());
    for j in 1..=grid.freqs() {
        total.add_assign(&info_jk(&cjk_from(&sigma, model.noise_sq(k), j, grid.h()))?);
    }
    Ok(total)
}
