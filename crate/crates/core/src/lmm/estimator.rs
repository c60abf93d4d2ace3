use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::marketdata::{
    choose_grid, estimate_noise_variances, local_noise_levels, BlockGrid, GridOverrides,
    LocalNoise, TickSeries,
};
use crate::mattensor::{
    default_floor, floor_eigenvalues, psd_project, unvec, vec, vec_index, z_matrix, SymMat,
    TensorMat,
};
use crate::spectral::{compute_spectral_with, IncrementRule, SpectralArray};

use super::model::{bias_jk, cjk_from, info_k, LocalModel};
use super::weights::{block_weights, truncation_residual, BlockWeights, Normalization};

/// Pilot window used when none is given.
pub const DEFAULT_PILOT_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    /// Confidence level of the per-entry intervals.
    pub level: f64,
    pub psd_project: bool,
    pub normalization: Normalization,
    /// Pilot window `K` in blocks; `None` uses `min(8, 1/h)`.
    pub pilot_window: Option<usize>,
    /// Compute the truncation residual for the diagnostics.
    pub residual: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            level: 0.95,
            psd_project: false,
            normalization: Normalization::Truncated,
            pilot_window: None,
            residual: true,
        }
    }
}

impl EstimateOptions {
    fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence level {} not in (0, 1)",
                self.level
            )));
        }
        Ok(())
    }

    pub fn window_for(&self, grid: &BlockGrid) -> usize {
        self.pilot_window
            .unwrap_or(DEFAULT_PILOT_WINDOW.min(grid.blocks()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    /// `(p, q)` with `p ≤ q`.
    pub entry: [usize; 2],
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotSummary {
    pub window: usize,
    /// Smallest eigenvalue over all blocks before flooring.
    pub min_raw_eigenvalue: f64,
    /// Blocks whose pilot needed flooring.
    pub floored_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub h: f64,
    #[serde(rename = "J")]
    pub freqs: usize,
    pub r: f64,
    #[serde(rename = "K")]
    pub pilot_window: Option<usize>,
    pub truncation_residual: Option<f64>,
    pub n_per_asset: Vec<usize>,
    pub eta_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub assets: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot: Option<PilotSummary>,
}

impl Diagnostics {
    fn for_grid(grid: &BlockGrid) -> Self {
        Diagnostics {
            h: grid.h(),
            freqs: grid.freqs(),
            r: grid.r(),
            pilot_window: None,
            truncation_residual: None,
            n_per_asset: Vec::new(),
            eta_hat: Vec::new(),
            assets: Vec::new(),
            pilot: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    /// `vec` of the raw estimate of `∫Σ`.
    pub estimate_vec: DVector<f64>,
    /// Symmetrized estimate, PSD-projected when requested.
    pub estimate_mat: SymMat,
    /// `Î_n⁻¹𝒵`.
    pub cov: TensorMat,
    /// `Î_n⁻¹ = Σ_k h² I_k⁻¹`.
    pub info_inv: TensorMat,
    pub ci: Vec<ConfidenceInterval>,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    estimate: Vec<Vec<f64>>,
    vcov: Vec<Vec<f64>>,
    ci: &'a [ConfidenceInterval],
    diagnostics: &'a Diagnostics,
}

impl EstimateReport {
    pub fn dim(&self) -> usize {
        self.estimate_mat.dim()
    }

    /// Standard error of entry `(p, q)`.
    pub fn std_error(&self, p: usize, q: usize) -> f64 {
        let i = vec_index(p, q, self.dim());
        self.cov.as_matrix()[(i, i)].max(0.0).sqrt()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let r = ReportJson {
            estimate: self.estimate_mat.to_rows(),
            vcov: self.cov.to_rows(),
            ci: &self.ci,
            diagnostics: &self.diagnostics,
        };
        serde_json::to_value(r).expect("report serializes")
    }
}

/// `Σ_j W_j vec(S_j S_jᵀ − B_j)` for one block.
pub fn block_contribution(
    stats: &[DVector<f64>],
    biases: &[DMatrix<f64>],
    weights: &BlockWeights,
) -> DVector<f64> {
    let d = stats[0].len();
    let mut acc = DVector::zeros(d * d);
    for ((s, b), w) in stats.iter().zip(biases).zip(&weights.w) {
        let moment = s * s.transpose() - b;
        acc += w.apply(&vec(&moment));
    }
    acc
}

fn block_stats(spec: &SpectralArray, k: usize) -> Vec<DVector<f64>> {
    (1..=spec.grid().freqs())
        .map(|j| spec.vector(j, k))
        .collect()
}

fn block_biases(noise_sq: &[f64], grid: &BlockGrid) -> Vec<DMatrix<f64>> {
    (1..=grid.freqs())
        .map(|j| bias_jk(noise_sq, j, grid.h()).into_matrix())
        .collect()
}

fn check_shapes(spec: &SpectralArray, model: &LocalModel) -> Result<()> {
    model.check_grid(spec.grid())?;
    if model.dim() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: model.dim(),
        });
    }
    Ok(())
}

/// Estimate with weights from `weight_model` and information from `info_model` (same as the
/// weight model when `None`).
fn estimate_core(
    spec: &SpectralArray,
    weight_model: &LocalModel,
    info_model: Option<&LocalModel>,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    opts.validate()?;
    check_shapes(spec, weight_model)?;
    let info_model = info_model.filter(|m| *m != weight_model);
    if let Some(m) = info_model {
        check_shapes(spec, m)?;
    }
    let grid = *spec.grid();
    let (d, h) = (spec.dim(), grid.h());

    let per_block: Vec<(DVector<f64>, TensorMat)> = (0..grid.blocks())
        .into_par_iter()
        .map(|k| {
            let noise = weight_model.noise_sq(k);
            let bw = block_weights(
                &weight_model.weight_sigma(k),
                noise,
                &grid,
                opts.normalization,
            )?;
            let contrib =
                block_contribution(&block_stats(spec, k), &block_biases(noise, &grid), &bw);
            let inv = match (info_model, opts.normalization) {
                (None, Normalization::Truncated) => bw.info_inv,
                (Some(m), _) => info_k(m, k, &grid)?.spd_inverse()?,
                (None, Normalization::Full) => info_k(weight_model, k, &grid)?.spd_inverse()?,
            };
            Ok((contrib, inv))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut estimate_vec = DVector::zeros(d * d);
    let mut info_inv = TensorMat::zeros(d);
    for (c, inv) in &per_block {
        estimate_vec += c * h;
        info_inv.add_assign(&inv.scale(h * h));
    }
    let info_inv = info_inv.symmetrized();
    let cov = info_inv.mul(&z_matrix(d));

    let mut estimate_mat = SymMat::symmetrize(&unvec(&estimate_vec, d));
    if opts.psd_project {
        estimate_mat = psd_project(&estimate_mat);
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + 0.5 * opts.level);
    let mut ci = Vec::with_capacity(d * (d + 1) / 2);
    for p in 0..d {
        for q in p..d {
            let i = vec_index(p, q, d);
            let half = z * cov.as_matrix()[(i, i)].max(0.0).sqrt();
            let mid = estimate_mat.get(p, q);
            ci.push(ConfidenceInterval {
                entry: [p, q],
                lo: mid - half,
                hi: mid + half,
                level: opts.level,
            });
        }
    }

    let mut diagnostics = Diagnostics::for_grid(&grid);
    if opts.residual {
        diagnostics.truncation_residual = truncation_residual(weight_model, &grid)?;
    }
    Ok(EstimateReport {
        estimate_vec,
        estimate_mat,
        cov,
        info_inv,
        ci,
        diagnostics,
    })
}

/// LMM estimator with oracle weights `W_jk = I_k⁻¹I_jk` from the true local model.
pub fn oracle_lmm(
    spec: &SpectralArray,
    model: &LocalModel,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    estimate_core(spec, model, None, opts)
}

fn window_start(k: usize, window: usize, blocks: usize) -> usize {
    (k as i64 - (window / 2) as i64).clamp(0, (blocks - window) as i64) as usize
}

/// Local pilot `Σ̂^{kh}` and a summary of how much flooring it needed.
pub fn pilot_sigma_with_summary(
    spec: &SpectralArray,
    noise: &LocalNoise,
    window: usize,
) -> Result<(LocalModel, PilotSummary)> {
    let grid = *spec.grid();
    let (blocks, d, freqs, h) = (grid.blocks(), spec.dim(), grid.freqs(), grid.h());
    if window == 0 || window > blocks {
        return Err(Error::InvalidArgument(format!(
            "pilot window {window} must lie in 1..={blocks}"
        )));
    }
    if noise.blocks() != blocks {
        return Err(Error::GridMismatch);
    }
    if noise.assets() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: noise.assets(),
        });
    }
    let raw: Vec<DMatrix<f64>> = (0..blocks)
        .map(|k| {
            let mut m = DMatrix::zeros(d, d);
            for j in 1..=freqs {
                let s = spec.vector(j, k);
                m += &s * s.transpose() - bias_jk(noise.block(k), j, h).as_matrix();
            }
            m / freqs as f64
        })
        .collect();
    let mut min_raw = f64::INFINITY;
    let mut floored = 0;
    let sigma = (0..blocks)
        .map(|k| {
            let start = window_start(k, window, blocks);
            let mut m = DMatrix::zeros(d, d);
            for r in &raw[start..start + window] {
                m += r;
            }
            let s = SymMat::symmetrize(&(m / window as f64));
            let floor = default_floor(&s);
            let min = s.min_eigenvalue();
            min_raw = min_raw.min(min);
            if min < floor {
                floored += 1;
            }
            floor_eigenvalues(&s, floor)
        })
        .collect();
    let model = LocalModel::with_noise(sigma, noise)?;
    Ok((
        model,
        PilotSummary {
            window,
            min_raw_eigenvalue: min_raw,
            floored_blocks: floored,
        },
    ))
}

/// Pilot `Σ̂(t) = K⁻¹ Σ_{k∈𝒦_t} J⁻¹ Σ_j (S_jkS_jkᵀ − π²j²h⁻²diag(Ĥ²))`, averaged over `K` adjacent
/// blocks (windows shifted inwards at the boundary), symmetrized and eigenvalue-floored.
pub fn pilot_sigma(spec: &SpectralArray, noise: &LocalNoise, window: usize) -> Result<LocalModel> {
    Ok(pilot_sigma_with_summary(spec, noise, window)?.0)
}

/// Averages the pilot over coarse blocks `[mr, (m+1)r)`, keeping each fine block's noise.
pub fn coarse_model(pilot: &LocalModel, grid: &BlockGrid) -> Result<LocalModel> {
    pilot.check_grid(grid)?;
    let per = grid.fine_per_coarse();
    let d = pilot.dim();
    let coarse: Vec<SymMat> = (0..grid.coarse())
        .map(|m| {
            let mut acc = DMatrix::zeros(d, d);
            for k in m * per..(m + 1) * per {
                acc += pilot.sigma(k).as_matrix();
            }
            SymMat::symmetrize(&(acc / per as f64))
        })
        .collect();
    let sigma = (0..grid.blocks())
        .map(|k| coarse[grid.coarse_of(k)].clone())
        .collect();
    let noise = (0..grid.blocks())
        .map(|k| pilot.noise_sq(k).to_vec())
        .collect();
    LocalModel::new(sigma, noise)
}

/// Second stage of the adaptive estimator for a given pilot: weights from coarse averages of
/// the pilot, information from the fine-block pilot.
pub fn lmm_with_pilot(
    spec: &SpectralArray,
    pilot: &LocalModel,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    let weight_model = coarse_model(pilot, spec.grid())?;
    estimate_core(spec, &weight_model, Some(pilot), opts)
}

/// Two-stage LMM estimator with adaptive weights and plug-in noise levels.
pub fn adaptive_lmm(
    spec: &SpectralArray,
    noise: &LocalNoise,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    let window = opts.window_for(spec.grid());
    let (pilot, summary) = pilot_sigma_with_summary(spec, noise, window)?;
    let mut report = lmm_with_pilot(spec, &pilot, opts)?;
    report.diagnostics.pilot_window = Some(window);
    report.diagnostics.pilot = Some(summary);
    Ok(report)
}

/// Result of the full tick-data pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: EstimateReport,
    pub grid: BlockGrid,
    pub spectral: SpectralArray,
    pub noise: LocalNoise,
}

/// Grid choice, noise estimation, spectral statistics and the adaptive estimator.
pub fn estimate_from_ticks(
    series: &[TickSeries],
    overrides: GridOverrides,
    opts: &EstimateOptions,
    rule: IncrementRule,
) -> Result<PipelineOutput> {
    let grid = choose_grid(series, overrides)?;
    let eta = estimate_noise_variances(series)?;
    let noise = local_noise_levels(series, &grid, &eta)?;
    let spectral = compute_spectral_with(series, &grid, rule)?;
    let mut report = adaptive_lmm(&spectral, &noise, opts)?;
    report.diagnostics.n_per_asset = series.iter().map(TickSeries::n_increments).collect();
    report.diagnostics.eta_hat = eta;
    report.diagnostics.assets = series.iter().map(|s| s.asset_id().to_string()).collect();
    Ok(PipelineOutput {
        report,
        grid,
        spectral,
        noise,
    })
}

/// Recomputes the oracle estimate block by block after transforming `S̃_jk = A_k S_jk`,
/// `C̃_jk = A_k C_jk A_kᵀ`, `B̃_jk = A_k B_jk A_kᵀ`, maps each block contribution back with
/// `(A_k⊗A_k)⁻¹` and returns the maximal deviation relative to the largest estimate entry.
pub fn equivariance_check(
    spec: &SpectralArray,
    model: &LocalModel,
    transforms: &[DMatrix<f64>],
) -> Result<f64> {
    check_shapes(spec, model)?;
    let grid = *spec.grid();
    if transforms.len() != grid.blocks() {
        return Err(Error::DimensionMismatch {
            expected: grid.blocks(),
            got: transforms.len(),
        });
    }
    let d = model.dim();
    let h = grid.h();
    let mut plain = DVector::zeros(d * d);
    let mut mapped = DVector::zeros(d * d);
    for (k, a) in transforms.iter().enumerate() {
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: a.nrows(),
            });
        }
        let lu = a.clone().lu();
        if lu.determinant().abs() < 1e-300 {
            return Err(Error::SingularTransform(k));
        }
        let a_inv = lu.try_inverse().ok_or(Error::SingularTransform(k))?;
        let sigma = model.weight_sigma(k);
        let noise = model.noise_sq(k);
        let stats = block_stats(spec, k);
        let biases = block_biases(noise, &grid);
        let cs: Vec<SymMat> = (1..=grid.freqs())
            .map(|j| cjk_from(&sigma, noise, j, h))
            .collect();
        plain += block_contribution(&stats, &biases, &BlockWeights::from_covariances(&cs)?) * h;

        let t_stats: Vec<DVector<f64>> = stats.iter().map(|s| a * s).collect();
        let t_biases: Vec<DMatrix<f64>> = biases.iter().map(|b| a * b * a.transpose()).collect();
        let t_cs: Vec<SymMat> = cs
            .iter()
            .map(|c| SymMat::symmetrize(&(a * c.as_matrix() * a.transpose())))
            .collect();
        let t_contrib =
            block_contribution(&t_stats, &t_biases, &BlockWeights::from_covariances(&t_cs)?);
        // (A⊗A)⁻¹ vec(M) = vec(A⁻¹ M A⁻ᵀ)
        let back = vec(&(&a_inv * unvec(&t_contrib, d) * a_inv.transpose()));
        mapped += back * h;
    }
    let scale = plain.amax().max(f64::MIN_POSITIVE);
    Ok((plain - mapped).amax() / scale)
}
