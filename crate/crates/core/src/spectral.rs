//! Local spectral statistics `S_jk` from tick data, and a sampler for them under the
//! block-constant Gaussian model.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lmm::model::{cjk, LocalModel};
use crate::marketdata::{BlockGrid, TickSeries};
use crate::mattensor::psd_sqrt;

/// `S_jk ∈ ℝ^d` for `j = 1..=J`, `k = 0..blocks`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralArray {
    grid: BlockGrid,
    d: usize,
    stats: Vec<f64>,
}

impl SpectralArray {
    pub fn zeros(grid: BlockGrid, d: usize) -> Self {
        SpectralArray {
            grid,
            d,
            stats: vec![0.0; grid.blocks() * grid.freqs() * d],
        }
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn offset(&self, j: usize, k: usize) -> usize {
        debug_assert!(j >= 1 && j <= self.grid.freqs() && k < self.grid.blocks());
        (k * self.grid.freqs() + j - 1) * self.d
    }

    /// `S_jk`, with `j` starting at 1.
    pub fn get(&self, j: usize, k: usize) -> &[f64] {
        let o = self.offset(j, k);
        &self.stats[o..o + self.d]
    }

    pub fn get_mut(&mut self, j: usize, k: usize) -> &mut [f64] {
        let o = self.offset(j, k);
        let d = self.d;
        &mut self.stats[o..o + d]
    }

    pub fn vector(&self, j: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.get(j, k))
    }

    /// All statistics of block `k`, frequency-major.
    pub fn block(&self, k: usize) -> &[f64] {
        let len = self.grid.freqs() * self.d;
        &self.stats[k * len..(k + 1) * len]
    }

    pub fn scale(&self, c: f64) -> Self {
        let stats = self.stats.iter().map(|s| c * s).collect();
        SpectralArray {
            stats,
            ..self.clone()
        }
    }

    pub fn add(&self, other: &SpectralArray) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        if self.d != other.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: other.d,
            });
        }
        let stats = self
            .stats
            .iter()
            .zip(&other.stats)
            .map(|(a, b)| a + b)
            .collect();
        Ok(SpectralArray {
            stats,
            ..self.clone()
        })
    }

    /// Long-format CSV `j,k,component,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["j", "k", "component", "value"])
            .map_err(csv_error)?;
        for k in 0..self.grid.blocks() {
            for j in 1..=self.grid.freqs() {
                for (l, v) in self.get(j, k).iter().enumerate() {
                    w.serialize((j, k, l, v)).map_err(csv_error)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// `Φ_jk(t) = √(2h)/(jπ)·sin(jπh⁻¹(t − kh))` on `[kh, (k+1)h]`, zero elsewhere.
pub fn phi_weight(j: usize, k: usize, grid: &BlockGrid, t: f64) -> f64 {
    let h = grid.h();
    let start = k as f64 * h;
    if t < start || t > start + h {
        return 0.0;
    }
    let jp = j as f64 * PI;
    (2.0 * h).sqrt() / jp * (jp * (t - start) / h).sin()
}

/// How an increment is attributed to blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IncrementRule {
    /// The whole increment goes to the block `[kh, (k+1)h)` containing the interval midpoint.
    #[default]
    Midpoint,
    /// An increment straddling block boundaries is split in proportion to the overlap, each part
    /// evaluated at the midpoint of its piece.
    Split,
}

/// Adds `√(2/h)·dy·sin(jπu)` for `j = 1..=J` to `out`, where `u = (t − kh)/h ∈ [0, 1]`.
fn accumulate(out: &mut [f64], dy: f64, u: f64, scale: f64) {
    let theta = PI * u;
    let (s1, c1) = theta.sin_cos();
    let two_c = 2.0 * c1;
    let (mut prev, mut cur) = (0.0, s1);
    let amp = scale * dy;
    for o in out.iter_mut() {
        *o += amp * cur;
        let next = two_c * cur - prev;
        prev = cur;
        cur = next;
    }
}

/// Spectral statistics of one asset, returned block-major as `[k][j]`.
fn asset_statistics(series: &TickSeries, grid: &BlockGrid, rule: IncrementRule) -> Vec<Vec<f64>> {
    let (blocks, h) = (grid.blocks(), grid.h());
    let scale = (2.0 / h).sqrt();
    let mut out = vec![vec![0.0; grid.freqs()]; blocks];
    let (t, y) = (series.times(), series.prices());
    for i in 1..t.len() {
        let dy = y[i] - y[i - 1];
        if dy == 0.0 {
            continue;
        }
        let (a, b) = (t[i - 1], t[i]);
        match rule {
            IncrementRule::Midpoint => {
                let m = 0.5 * (a + b);
                let k = grid.containing_block(m);
                accumulate(&mut out[k], dy, m * blocks as f64 - k as f64, scale);
            }
            IncrementRule::Split => {
                let (ka, kb) = (grid.containing_block(a), grid.containing_block(b));
                if ka == kb || b <= a {
                    let m = 0.5 * (a + b);
                    accumulate(&mut out[ka], dy, m * blocks as f64 - ka as f64, scale);
                    continue;
                }
                for k in ka..=kb {
                    let lo = a.max(k as f64 * h);
                    let hi = b.min((k + 1) as f64 * h);
                    if hi <= lo {
                        continue;
                    }
                    let part = dy * (hi - lo) / (b - a);
                    let m = 0.5 * (lo + hi);
                    accumulate(&mut out[k], part, m * blocks as f64 - k as f64, scale);
                }
            }
        }
    }
    out
}

/// `S_jk^{(l)} = πjh⁻¹ Σ_ν ΔY_ν^{(l)} Φ_jk(midpoint_ν)` with increments attributed by `rule`.
pub fn compute_spectral_with(
    series: &[TickSeries],
    grid: &BlockGrid,
    rule: IncrementRule,
) -> Result<SpectralArray> {
    if series.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = series.len();
    let per_asset: Vec<Vec<Vec<f64>>> = series
        .par_iter()
        .map(|s| asset_statistics(s, grid, rule))
        .collect();
    let mut out = SpectralArray::zeros(*grid, d);
    for (l, a) in per_asset.iter().enumerate() {
        for (k, block) in a.iter().enumerate() {
            for (jm1, &v) in block.iter().enumerate() {
                out.get_mut(jm1 + 1, k)[l] = v;
            }
        }
    }
    if out.stats.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite spectral statistic".into(),
        ));
    }
    Ok(out)
}

/// Spectral statistics with the midpoint rule.
pub fn compute_spectral(series: &[TickSeries], grid: &BlockGrid) -> Result<SpectralArray> {
    compute_spectral_with(series, grid, IncrementRule::Midpoint)
}

/// Independent `S_jk ~ N(0, C_jk)` draws for every block and frequency.
pub fn sample_spectral_e2(
    model: &LocalModel,
    grid: &BlockGrid,
    seed: u64,
) -> Result<SpectralArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_spectral_e2_with(model, grid, &mut rng)
}

/// Symmetric square roots of all `C_jk`, reusable across draws.
#[derive(Debug, Clone)]
pub struct E2Sampler {
    grid: BlockGrid,
    d: usize,
    roots: Vec<nalgebra::DMatrix<f64>>,
}

impl E2Sampler {
    pub fn new(model: &LocalModel, grid: &BlockGrid) -> Result<Self> {
        model.check_grid(grid)?;
        let mut roots = Vec::with_capacity(grid.blocks() * grid.freqs());
        for k in 0..grid.blocks() {
            for j in 1..=grid.freqs() {
                let c = cjk(model, j, k, grid);
                let min = c.min_eigenvalue();
                if !(min > 0.0) {
                    return Err(Error::NotPsd {
                        min_eigenvalue: min,
                    });
                }
                roots.push(psd_sqrt(&c)?.into_matrix());
            }
        }
        Ok(E2Sampler {
            grid: *grid,
            d: model.dim(),
            roots,
        })
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> SpectralArray {
        let mut out = SpectralArray::zeros(self.grid, self.d);
        let d = self.d;
        let mut z = DVector::zeros(d);
        for (i, root) in self.roots.iter().enumerate() {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let s = root * &z;
            out.stats[i * d..(i + 1) * d].copy_from_slice(s.as_slice());
        }
        out
    }
}

pub fn sample_spectral_e2_with<R: rand::Rng + ?Sized>(
    model: &LocalModel,
    grid: &BlockGrid,
    rng: &mut R,
) -> Result<SpectralArray> {
    Ok(E2Sampler::new(model, grid)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mattensor::SymMat;

    #[test]
    fn phi_examples() {
        let g = BlockGrid::fine(10, 5).unwrap();
        let h = g.h();
        assert_eq!(phi_weight(3, 4, &g, 0.4), 0.0);
        let j = 3;
        let v = phi_weight(j, 4, &g, 0.4 + h / (2.0 * j as f64));
        assert!((v - (2.0 * h).sqrt() / (j as f64 * PI)).abs() < 1e-15);
        assert!(phi_weight(1, 4, &g, 0.5).abs() < 1e-14);
        assert_eq!(phi_weight(1, 4, &g, 0.7), 0.0);
    }

    #[test]
    fn constant_prices_give_zero() {
        let g = BlockGrid::fine(4, 6).unwrap();
        let s = TickSeries::new(
            "a",
            (0..=40).map(|i| i as f64 / 40.0).collect(),
            vec![3.0; 41],
        )
        .unwrap();
        let out = compute_spectral(&[s], &g).unwrap();
        assert!(out.stats.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_increment_hand_value() {
        let g = BlockGrid::fine(4, 6).unwrap();
        let (h, k, j) = (g.h(), 2, 3);
        let m = k as f64 * h + h / (2.0 * j as f64);
        let (a, b) = (m - 0.001, m + 0.001);
        let s = TickSeries::new("a", vec![0.0, a, b, 1.0], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let out = compute_spectral(&[s], &g).unwrap();
        assert!((out.get(j, k)[0] - (2.0 / h).sqrt()).abs() < 1e-12);
        // matches the direct Φ evaluation for every frequency
        for jj in 1..=6 {
            let direct = PI * jj as f64 / h * phi_weight(jj, k, &g, m);
            assert!((out.get(jj, k)[0] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn split_rule_agrees_when_nothing_straddles() {
        let g = BlockGrid::fine(5, 8).unwrap();
        let times: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let prices: Vec<f64> = times.iter().map(|t| (7.0 * t).sin()).collect();
        let s = TickSeries::new("a", times, prices).unwrap();
        let a = compute_spectral_with(&[s.clone()], &g, IncrementRule::Midpoint).unwrap();
        let b = compute_spectral_with(&[s], &g, IncrementRule::Split).unwrap();
        for (x, y) in a.stats.iter().zip(&b.stats) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let g = BlockGrid::fine(3, 4).unwrap();
        let m =
            LocalModel::constant(SymMat::equicorrelated(2, 1.0, 0.5), vec![1e-3, 1e-3], 3).unwrap();
        assert_eq!(
            sample_spectral_e2(&m, &g, 7).unwrap(),
            sample_spectral_e2(&m, &g, 7).unwrap()
        );
        assert_ne!(
            sample_spectral_e2(&m, &g, 7).unwrap(),
            sample_spectral_e2(&m, &g, 8).unwrap()
        );
    }

    #[test]
    fn sampler_rejects_singular_covariance() {
        let g = BlockGrid::fine(2, 2).unwrap();
        let m =
            LocalModel::constant(SymMat::from_diagonal(&[1.0, 0.0]), vec![0.0, 0.0], 2).unwrap();
        assert!(matches!(
            sample_spectral_e2(&m, &g, 1),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn csv_output_shape() {
        let g = BlockGrid::fine(2, 3).unwrap();
        let m = LocalModel::constant(SymMat::identity(2), vec![0.0, 0.0], 2).unwrap();
        let s = sample_spectral_e2(&m, &g, 3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("j,k,component,value"));
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 2);
    }
}
