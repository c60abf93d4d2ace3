use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::marketdata::BlockGrid;
use crate::mattensor::{SymMat, TensorMat};

use super::closed_form::full_info_k;
use super::model::{cjk_from, info_jk, LocalModel};

/// How `I_k` is normalized when forming `W_jk = I_k⁻¹I_jk`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `I_k = Σ_{j≤J} I_jk`, so `Σ_{j≤J} W_jk = I` exactly and the estimator stays unbiased.
    #[default]
    Truncated,
    /// `I_k = Σ_{j≥1} I_jk` in closed form; the truncated weights then miss the `j > J` tail.
    Full,
}

/// Weights and information of one block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    /// `W_jk` for `j = 1..=J`.
    pub w: Vec<TensorMat>,
    pub info: TensorMat,
    pub info_inv: TensorMat,
}

impl BlockWeights {
    /// `Σ_{j≤J} W_jk`.
    pub fn weight_sum(&self) -> TensorMat {
        let mut s = TensorMat::zeros(self.info.dim());
        for w in &self.w {
            s.add_assign(w);
        }
        s
    }

    /// Builds weights from explicit per-frequency covariances `C_j`, `j = 1..=J`.
    pub fn from_covariances(cs: &[SymMat]) -> Result<Self> {
        let infos = cs.iter().map(info_jk).collect::<Result<Vec<_>>>()?;
        let mut info = TensorMat::zeros(cs[0].dim());
        for i in &infos {
            info.add_assign(i);
        }
        Self::with_info(infos, info)
    }

    fn with_info(infos: Vec<TensorMat>, info: TensorMat) -> Result<Self> {
        let info_inv = info.spd_inverse()?;
        let w = infos.iter().map(|i| info_inv.mul(i)).collect();
        Ok(BlockWeights { w, info, info_inv })
    }
}

/// `W_jk` for every block and frequency.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub blocks: Vec<BlockWeights>,
    pub normalization: Normalization,
}

impl WeightSet {
    /// `max_k ‖Σ_{j≤J} W_jk − I‖₂`.
    pub fn max_weight_sum_deviation(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let d = b.info.dim();
                b.weight_sum()
                    .add(&TensorMat::identity(d).scale(-1.0))
                    .spectral_norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Weights for a single block from a (floored) covariance and its noise levels.
pub fn block_weights(
    sigma: &SymMat,
    noise_sq: &[f64],
    grid: &BlockGrid,
    normalization: Normalization,
) -> Result<BlockWeights> {
    let h = grid.h();
    let cs: Vec<SymMat> = (1..=grid.freqs())
        .map(|j| cjk_from(sigma, noise_sq, j, h))
        .collect();
    match normalization {
        Normalization::Truncated => BlockWeights::from_covariances(&cs),
        Normalization::Full => {
            let infos = cs.iter().map(info_jk).collect::<Result<Vec<_>>>()?;
            BlockWeights::with_info(infos, full_info_k(sigma, noise_sq, h)?)
        }
    }
}

/// Oracle weights `W_jk = I_k⁻¹I_jk` with truncated normalization.
pub fn weights(model: &LocalModel, grid: &BlockGrid) -> Result<WeightSet> {
    weights_with(model, grid, Normalization::Truncated)
}

pub fn weights_with(
    model: &LocalModel,
    grid: &BlockGrid,
    normalization: Normalization,
) -> Result<WeightSet> {
    model.check_grid(grid)?;
    let blocks = (0..model.blocks())
        .into_par_iter()
        .map(|k| {
            block_weights(
                &model.weight_sigma(k),
                model.noise_sq(k),
                grid,
                normalization,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightSet {
        blocks,
        normalization,
    })
}

/// `‖Σ_{j≤J} W_jk − I‖₂` with `W_jk` normalized by the untruncated information, i.e. the share
/// of information lost by cutting frequencies at `J`. `None` when some noise level is zero.
pub fn truncation_residual(model: &LocalModel, grid: &BlockGrid) -> Result<Option<f64>> {
    if (0..model.blocks()).any(|k| model.noise_sq(k).iter().any(|&n| n <= 0.0)) {
        return Ok(None);
    }
    match weights_with(model, grid, Normalization::Full) {
        Ok(w) => Ok(Some(w.max_weight_sum_deviation())),
        Err(Error::Singular) => Ok(None),
        Err(e) => Err(e),
    }
}
