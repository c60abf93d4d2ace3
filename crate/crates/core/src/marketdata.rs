//! Tick data, block grids and the discrete noise and sampling diagnostics.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One asset's observation times on [0, 1] and its noisy prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickSeries {
    asset_id: String,
    times: Vec<f64>,
    prices: Vec<f64>,
}

impl TickSeries {
    pub fn new(asset_id: impl Into<String>, times: Vec<f64>, prices: Vec<f64>) -> Result<Self> {
        let asset_id = asset_id.into();
        if times.len() != prices.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: prices.len(),
            });
        }
        if times.len() < 2 {
            return Err(Error::EmptyAsset(asset_id));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::NonMonotoneTime {
                    asset: asset_id,
                    time: w[1],
                });
            }
        }
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!(
                "time {t} of asset {asset_id:?} outside [0, 1]"
            )));
        }
        if let Some(&p) = prices.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite price {p} for {asset_id:?}"
            )));
        }
        Ok(TickSeries {
            asset_id,
            times,
            prices,
        })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    /// Number of price increments, `len - 1`.
    pub fn n_increments(&self) -> usize {
        self.times.len() - 1
    }

    /// Same times, prices multiplied by `c`.
    pub fn scaled(&self, c: f64) -> TickSeries {
        TickSeries {
            asset_id: self.asset_id.clone(),
            times: self.times.clone(),
            prices: self.prices.iter().map(|p| p * c).collect(),
        }
    }

    /// Same times, prices replaced.
    pub fn with_prices(&self, prices: Vec<f64>) -> Result<TickSeries> {
        TickSeries::new(self.asset_id.clone(), self.times.clone(), prices)
    }
}

/// Block length `h = 1/blocks`, frequency cutoff `J = freqs`, coarse length `r = 1/coarse`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    blocks: usize,
    freqs: usize,
    coarse: usize,
}

impl BlockGrid {
    /// Validates `1/h`, `1/r`, `r/h` integral (`coarse` divides `blocks`) and `J ≥ 1`.
    pub fn new(blocks: usize, freqs: usize, coarse: usize) -> Result<Self> {
        if blocks == 0 || coarse == 0 {
            return Err(Error::InfeasibleGrid(
                "block counts must be positive".into(),
            ));
        }
        if freqs == 0 {
            return Err(Error::InfeasibleGrid(
                "frequency cutoff must be at least 1".into(),
            ));
        }
        if coarse > blocks || blocks % coarse != 0 {
            return Err(Error::InfeasibleGrid(format!(
                "r/h = {blocks}/{coarse} is not an integer"
            )));
        }
        Ok(BlockGrid {
            blocks,
            freqs,
            coarse,
        })
    }

    /// Grid whose coarse blocks coincide with the fine ones (`r = h`).
    pub fn fine(blocks: usize, freqs: usize) -> Result<Self> {
        Self::new(blocks, freqs, blocks)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn freqs(&self) -> usize {
        self.freqs
    }

    pub fn coarse(&self) -> usize {
        self.coarse
    }

    pub fn h(&self) -> f64 {
        1.0 / self.blocks as f64
    }

    pub fn r(&self) -> f64 {
        1.0 / self.coarse as f64
    }

    /// Fine blocks per coarse block, `r/h`.
    pub fn fine_per_coarse(&self) -> usize {
        self.blocks / self.coarse
    }

    /// Coarse block `m` with `kh ∈ [mr, (m+1)r)`.
    pub fn coarse_of(&self, k: usize) -> usize {
        k / self.fine_per_coarse()
    }

    /// Block owning the increment that ends at tick time `t`: blocks are `(kh, (k+1)h]`,
    /// the first one closed at 0.
    pub fn tick_block(&self, t: f64) -> usize {
        // slack absorbs rounding in times like i/n that sit exactly on a boundary
        let x = t * self.blocks as f64;
        let k = (x - 1e-9).ceil() as i64 - 1;
        k.clamp(0, self.blocks as i64 - 1) as usize
    }

    /// Block `[kh, (k+1)h)` containing `t`, the last one closed at 1.
    pub fn containing_block(&self, t: f64) -> usize {
        ((t * self.blocks as f64).floor() as usize).min(self.blocks - 1)
    }
}

/// Per-block squared local noise levels `(H^{kh}_l)²` and global noise variances `η_l²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalNoise {
    /// Indexed `[block][asset]`.
    pub levels: Vec<Vec<f64>>,
    pub eta_sq: Vec<f64>,
}

impl LocalNoise {
    pub fn blocks(&self) -> usize {
        self.levels.len()
    }

    pub fn assets(&self) -> usize {
        self.eta_sq.len()
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    asset: String,
    time: f64,
    price: f64,
}

/// Reads the long `asset,time,price` format. With `time_span = Some((t0, t1))` raw times are
/// mapped through `(t - t0)/(t1 - t0)`. Assets are returned in order of first appearance.
pub fn load_csv<R: Read>(reader: R, time_span: Option<(f64, f64)>) -> Result<Vec<TickSeries>> {
    if let Some((t0, t1)) = time_span {
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid time span [{t0}, {t1}]"
            )));
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut groups: IndexMap<String, Vec<(f64, f64)>> = IndexMap::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !row.time.is_finite() || !row.price.is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite value".into(),
            });
        }
        let t = match time_span {
            Some((t0, t1)) => (row.time - t0) / (t1 - t0),
            None => row.time,
        };
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Parse {
                line,
                message: format!("time {} maps outside [0, 1]", row.time),
            });
        }
        groups.entry(row.asset).or_default().push((t, row.price));
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput);
    }
    groups
        .into_iter()
        .map(|(asset, mut rows)| {
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            if let Some(w) = rows.windows(2).find(|w| w[1].0 <= w[0].0) {
                return Err(Error::NonMonotoneTime {
                    asset,
                    time: w[1].0,
                });
            }
            let (times, prices) = rows.into_iter().unzip();
            TickSeries::new(asset, times, prices)
        })
        .collect()
}

pub fn load_csv_path(
    path: impl AsRef<Path>,
    time_span: Option<(f64, f64)>,
) -> Result<Vec<TickSeries>> {
    let file = std::fs::File::open(path)?;
    load_csv(std::io::BufReader::new(file), time_span)
}

/// Writes series in the long `asset,time,price` format.
pub fn write_csv<W: std::io::Write>(writer: W, series: &[TickSeries]) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "asset,time,price")?;
    for s in series {
        for (t, p) in s.times.iter().zip(&s.prices) {
            writeln!(w, "{},{},{}", s.asset_id, t, p)?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .flush()?;
    Ok(())
}

/// `η̂² = Σ(ΔY)²/(2n)` with `n` the number of increments.
pub fn estimate_noise_variance(series: &TickSeries) -> Result<f64> {
    let p = series.prices();
    if p.len() < 2 {
        return Err(Error::TooFewTicks(p.len()));
    }
    let rv: f64 = p.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(rv / (2.0 * (p.len() - 1) as f64))
}

/// Block-wise quadratic variation of time for every block.
pub fn quadratic_time_all(series: &TickSeries, grid: &BlockGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.blocks()];
    for w in series.times().windows(2) {
        out[grid.tick_block(w[1])] += (w[1] - w[0]).powi(2);
    }
    out
}

/// `Σ (t_ν − t_{ν−1})²` over the increments whose end point lies in block `k`.
pub fn quadratic_time(series: &TickSeries, grid: &BlockGrid, k: usize) -> f64 {
    series
        .times()
        .windows(2)
        .filter(|w| grid.tick_block(w[1]) == k)
        .map(|w| (w[1] - w[0]).powi(2))
        .sum()
}

/// Ticks per block (by the same membership rule as [`quadratic_time`], the initial
/// observation counted in block 0).
pub fn ticks_per_block(series: &TickSeries, grid: &BlockGrid) -> Vec<usize> {
    let mut out = vec![0usize; grid.blocks()];
    for &t in series.times() {
        out[grid.tick_block(t)] += 1;
    }
    out
}

/// `(H^{kh}_l)² = η̂_l²·h⁻¹·quadratic_time(series_l, k)`.
///
/// Where an asset has fewer than two ticks in a block the level is floored at the asset's mean
/// level over all blocks.
pub fn local_noise_levels(
    series: &[TickSeries],
    grid: &BlockGrid,
    eta_sq: &[f64],
) -> Result<LocalNoise> {
    if series.len() != eta_sq.len() {
        return Err(Error::DimensionMismatch {
            expected: series.len(),
            got: eta_sq.len(),
        });
    }
    if let Some(&bad) = eta_sq.iter().find(|&&e| !(e >= 0.0 && e.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "noise variance {bad} must be >= 0"
        )));
    }
    let inv_h = grid.blocks() as f64;
    let mut levels = vec![vec![0.0; series.len()]; grid.blocks()];
    for (l, (s, &e2)) in series.iter().zip(eta_sq).enumerate() {
        let qt = quadratic_time_all(s, grid);
        let counts = ticks_per_block(s, grid);
        let per_block: Vec<f64> = qt.iter().map(|q| e2 * inv_h * q).collect();
        let mean = per_block.iter().sum::<f64>() / per_block.len() as f64;
        for k in 0..grid.blocks() {
            levels[k][l] = if counts[k] < 2 {
                per_block[k].max(mean)
            } else {
                per_block[k]
            };
        }
    }
    Ok(LocalNoise {
        levels,
        eta_sq: eta_sq.to_vec(),
    })
}

/// Estimates `η̂²` for every series.
pub fn estimate_noise_variances(series: &[TickSeries]) -> Result<Vec<f64>> {
    series.iter().map(estimate_noise_variance).collect()
}

/// Grid parameters fixed by the user; `None` means "use the default rule".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridOverrides {
    pub blocks: Option<usize>,
    pub freqs: Option<usize>,
    pub coarse: Option<usize>,
}

fn nearest_block_count(n_min: usize) -> usize {
    let n = n_min as f64;
    let target = n.ln() / n.sqrt();
    let inv = 1.0 / target;
    let lo = inv.floor().max(1.0) as usize;
    let hi = inv.ceil().max(1.0) as usize;
    let err = |b: usize| (1.0 / b as f64 - target).abs();
    if err(hi) < err(lo) {
        hi
    } else {
        lo
    }
}

fn default_freqs(blocks: usize, n_min: usize) -> usize {
    let j = (2.0 * (n_min as f64).sqrt() / blocks as f64).ceil() as usize;
    j.clamp(10, 100)
}

fn default_coarse(blocks: usize, n_min: usize) -> usize {
    let target = (n_min as f64).powf(-1.0 / 3.0);
    (1..=blocks)
        .filter(|m| blocks % m == 0)
        .find(|&m| m as f64 / blocks as f64 >= target)
        .map(|m| blocks / m)
        .unwrap_or(1)
}

fn is_sparse(series: &[TickSeries], grid: &BlockGrid) -> bool {
    series
        .iter()
        .any(|s| ticks_per_block(s, grid).iter().any(|&c| c < 2))
}

/// Picks `(h, J, r)` from the least frequently observed series.
///
/// Defaults: `1/h` nearest to `√n_min/log n_min`, `J = clamp(⌈2h√n_min⌉, 10, 100)`, `r` the
/// smallest admissible multiple of `h` with `r ≥ n_min^{-1/3}`. Without a block override the
/// block count is halved while some asset has fewer than two ticks in a block.
pub fn choose_grid(series: &[TickSeries], overrides: GridOverrides) -> Result<BlockGrid> {
    let n_min = series
        .iter()
        .map(TickSeries::n_increments)
        .min()
        .ok_or(Error::EmptyInput)?;
    if n_min < 1 {
        return Err(Error::TooFewTicks(n_min + 1));
    }
    let build = |blocks: usize| -> Result<BlockGrid> {
        let freqs = overrides
            .freqs
            .unwrap_or_else(|| default_freqs(blocks, n_min));
        let coarse = overrides
            .coarse
            .unwrap_or_else(|| default_coarse(blocks, n_min));
        BlockGrid::new(blocks, freqs, coarse)
    };

    let mut blocks = match (overrides.blocks, overrides.coarse) {
        (Some(b), _) => b,
        (None, Some(c)) if c > 0 => {
            // round h down so that r/h is an integer
            let b = nearest_block_count(n_min).max(c);
            b.div_ceil(c) * c
        }
        _ => nearest_block_count(n_min),
    };
    let mut grid = build(blocks)?;
    if overrides.blocks.is_none() {
        let step = overrides.coarse.unwrap_or(1);
        while is_sparse(series, &grid) && blocks > step {
            let halved = ((blocks / 2) / step * step).max(step);
            log::warn!("sparse blocks with 1/h = {blocks}; retrying with 1/h = {halved}");
            blocks = halved;
            grid = build(blocks)?;
        }
    } else if is_sparse(series, &grid) {
        log::warn!("grid with 1/h = {blocks} has blocks with fewer than two ticks");
    }
    Ok(grid)
}
