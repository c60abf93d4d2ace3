//! Scenario generators and the Monte-Carlo harness.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efficiency::{asymptotic_cov, PathSpec};
use crate::error::{Error, Result};
use crate::lmm::estimator::{adaptive_lmm, oracle_lmm, EstimateOptions};
use crate::lmm::model::LocalModel;
use crate::marketdata::{
    choose_grid, estimate_noise_variances, local_noise_levels, BlockGrid, GridOverrides, TickSeries,
};
use crate::mattensor::{psd_sqrt, vec_index, SymMat};
use crate::spectral::{compute_spectral_with, IncrementRule};

/// Homogeneous Poisson arrivals on (0, 1] with intensity `expected_count`, with 0 prepended.
pub fn poisson_times<R: Rng + ?Sized>(expected_count: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(expected_count > 0.0 && expected_count.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "expected count {expected_count} must be positive"
        )));
    }
    let exp = Exp::new(expected_count).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut times = vec![0.0];
    let mut t = exp.sample(rng);
    while t <= 1.0 {
        if t > 0.0 {
            times.push(t);
        }
        t += exp.sample(rng);
    }
    Ok(times)
}

/// Intraday shape `φ²(t) = c(1 + a·e^{−bt} + g·e^{−b(1−t)})` normalized to `∫φ² = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeasonalShape {
    pub a: f64,
    pub g: f64,
    pub b: f64,
}

impl Default for SeasonalShape {
    fn default() -> Self {
        SeasonalShape {
            a: 2.0,
            g: 1.0,
            b: 10.0,
        }
    }
}

/// `∫₀¹ e^{−bt} dt`.
fn exp_mean(b: f64) -> f64 {
    if b.abs() < 1e-12 {
        1.0
    } else {
        -(-b).exp_m1() / b
    }
}

impl SeasonalShape {
    pub fn flat() -> Self {
        SeasonalShape {
            a: 0.0,
            g: 0.0,
            b: 0.0,
        }
    }

    fn raw(&self, t: f64) -> f64 {
        1.0 + self.a * (-self.b * t).exp() + self.g * (-self.b * (1.0 - t)).exp()
    }

    /// Normalizing constant `c`.
    pub fn normalizer(&self) -> Result<f64> {
        let c = 1.0 / (1.0 + (self.a + self.g) * exp_mean(self.b));
        let nonneg = (0..=1000).all(|i| self.raw(i as f64 / 1000.0) >= 0.0);
        if !(c.is_finite() && c > 0.0) || !nonneg {
            return Err(Error::NonintegrableShape);
        }
        Ok(c)
    }

    /// `φ²(t)`.
    pub fn phi_sq(&self, t: f64) -> Result<f64> {
        Ok(self.normalizer()? * self.raw(t))
    }

    /// `∫φ⁴`.
    pub fn phi4_integral(&self) -> Result<f64> {
        let c = self.normalizer()?;
        let (a, g, b) = (self.a, self.g, self.b);
        let inner = 1.0
            + (a * a + g * g) * exp_mean(2.0 * b)
            + 2.0 * (a + g) * exp_mean(b)
            + 2.0 * a * g * (-b).exp();
        Ok(c * c * inner)
    }
}

/// `φ(t) = √φ²(t)` for the given shape.
pub fn seasonal_factor(shape: &SeasonalShape, t: f64) -> Result<f64> {
    Ok(shape.phi_sq(t)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Equidistant,
    Poisson,
}

/// Constant `Σ`, i.i.d. Gaussian noise, equidistant or Poisson observation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantScenario {
    pub d: usize,
    pub sigma: SymMat,
    pub eta2: Vec<f64>,
    /// Per-asset number of increments (expected number for Poisson sampling).
    pub n: Vec<usize>,
    #[serde(default)]
    pub sampling: Sampling,
}

impl ConstantScenario {
    /// Two assets with unit volatilities, correlation `rho`, `η² = 0.1`, `n` synchronous
    /// equidistant observations.
    pub fn two_asset(rho: f64, n: usize) -> Self {
        ConstantScenario {
            d: 2,
            sigma: SymMat::equicorrelated(2, 1.0, rho),
            eta2: vec![0.1, 0.1],
            n: vec![n, n],
            sampling: Sampling::Equidistant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 || self.sigma.dim() != d || self.eta2.len() != d || self.n.len() != d {
            return Err(Error::InvalidScenario(format!(
                "all fields must have dimension d = {d}"
            )));
        }
        if self.sigma.min_eigenvalue() < -1e-12 * self.sigma.trace().abs().max(1.0) {
            return Err(Error::InvalidScenario(
                "sigma is not positive semi-definite".into(),
            ));
        }
        if self.eta2.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidScenario(
                "noise variances must be >= 0".into(),
            ));
        }
        if self.n.iter().any(|&n| n < 2) {
            return Err(Error::InvalidScenario("every asset needs n >= 2".into()));
        }
        Ok(())
    }
}

/// CIR variance with leverage, seasonal factor and Poisson sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub psi: Vec<f64>,
    pub gamma: Vec<f64>,
    pub rho: f64,
    #[serde(default)]
    pub season: SeasonalShape,
    /// Expected observation counts per asset.
    pub counts: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// `η_l = noise_factor·(E[∫φ⁴σ_l⁴])^{1/4}`.
    #[serde(default = "default_noise_factor")]
    pub noise_factor: f64,
}

fn default_steps() -> usize {
    23_400
}

fn default_noise_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HestonScenario {
    pub d: usize,
    pub heston: HestonParams,
    /// Fixed noise variances instead of the calibration rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta2: Option<Vec<f64>>,
    /// Initial variances instead of stationary draws.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_variance: Option<Vec<f64>>,
}

impl HestonScenario {
    /// Two assets with `(μ, α, ψ, γ) = (1, 6, 0.3, −0.3)`, signal correlation `rho` and the
    /// given expected counts.
    pub fn two_asset(rho: f64, counts: [f64; 2]) -> Self {
        HestonScenario {
            d: 2,
            heston: HestonParams {
                mu: vec![1.0; 2],
                alpha: vec![6.0; 2],
                psi: vec![0.3; 2],
                gamma: vec![-0.3; 2],
                rho,
                season: SeasonalShape::default(),
                counts: counts.to_vec(),
                steps: default_steps(),
                noise_factor: default_noise_factor(),
            },
            eta2: None,
            initial_variance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.heston;
        let d = self.d;
        let lens = [
            p.mu.len(),
            p.alpha.len(),
            p.psi.len(),
            p.gamma.len(),
            p.counts.len(),
        ];
        if d == 0 || lens.iter().any(|&l| l != d) {
            return Err(Error::InvalidScenario(format!(
                "all per-asset vectors must have length d = {d}"
            )));
        }
        if let Some(e) = &self.eta2 {
            if e.len() != d || e.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidScenario(
                    "eta2 must hold d values >= 0".into(),
                ));
            }
        }
        if let Some(v) = &self.initial_variance {
            if v.len() != d || v.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::InvalidScenario(
                    "initial_variance must hold d values >= 0".into(),
                ));
            }
        }
        if p.steps < 100 {
            return Err(Error::StepTooCoarse(p.steps));
        }
        if !(-1.0..=1.0).contains(&p.rho) || p.gamma.iter().any(|g| !(-1.0..=1.0).contains(g)) {
            return Err(Error::InvalidScenario(
                "correlations must lie in [-1, 1]".into(),
            ));
        }
        for l in 0..d {
            if !(p.mu[l] > 0.0 && p.alpha[l] > 0.0 && p.psi[l] >= 0.0 && p.counts[l] > 0.0) {
                return Err(Error::InvalidScenario(format!(
                    "asset {l}: need mu, alpha, counts > 0 and psi >= 0"
                )));
            }
            if 2.0 * p.alpha[l] * p.mu[l] < p.psi[l] * p.psi[l] {
                log::warn!("asset {l}: Feller condition 2αμ >= ψ² is violated");
            }
        }
        p.season.normalizer()?;
        Ok(())
    }

    /// Stationary `E[σ⁴] = μ² + ψ²μ/(2α)`.
    pub fn stationary_fourth_moment(&self, l: usize) -> f64 {
        let p = &self.heston;
        p.mu[l] * p.mu[l] + p.psi[l] * p.psi[l] * p.mu[l] / (2.0 * p.alpha[l])
    }

    /// Noise variances `η_l²`, from the calibration rule unless fixed.
    pub fn noise_variances(&self) -> Result<Vec<f64>> {
        if let Some(e) = &self.eta2 {
            return Ok(e.clone());
        }
        let phi4 = self.heston.season.phi4_integral()?;
        Ok((0..self.d)
            .map(|l| {
                let eta =
                    self.heston.noise_factor * (self.stationary_fourth_moment(l) * phi4).powf(0.25);
                eta * eta
            })
            .collect())
    }

    /// Cholesky factor of the joint correlation of `(Z_1..Z_d, V_1..V_d)`.
    fn correlation_factor(&self) -> Result<DMatrix<f64>> {
        let d = self.d;
        let p = &self.heston;
        let mut r = DMatrix::identity(2 * d, 2 * d);
        for l in 0..d {
            for m in 0..d {
                if l != m {
                    r[(l, m)] = p.rho;
                }
            }
            r[(l, d + l)] = p.gamma[l];
            r[(d + l, l)] = p.gamma[l];
        }
        // a tiny ridge admits the boundary cases |ρ| = 1 or |γ| = 1 when they are consistent
        let ridged = &r + DMatrix::identity(2 * d, 2 * d) * 1e-12;
        ridged
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::InvalidScenario("infeasible correlation structure".into()))
    }
}

/// Any scenario, tagged by `type` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Scenario {
    Constant(ConstantScenario),
    Heston(HestonScenario),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::Constant(c) => c.validate(),
            Scenario::Heston(h) => h.validate(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Scenario::Constant(c) => c.d,
            Scenario::Heston(h) => h.d,
        }
    }

    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Simulation> {
        match self {
            Scenario::Constant(c) => simulate_constant_with(c, rng),
            Scenario::Heston(h) => simulate_heston_with(h, rng),
        }
    }
}

/// The latent covolatility path.
#[derive(Debug, Clone, PartialEq)]
pub enum SpotPath {
    Constant(SymMat),
    /// Cumulative integrals `∫₀^t Σ` (column-major d×d) at increasing grid times from 0 to 1.
    Grid {
        times: Vec<f64>,
        cumulative: Vec<Vec<f64>>,
    },
}

/// What the simulation knows about the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthRecord {
    /// `∫₀¹Σ(t)dt`.
    pub integrated: SymMat,
    /// Noise variances `η_l²`.
    pub eta2: Vec<f64>,
    /// Realized observation counts (increments) per asset.
    pub n: Vec<usize>,
    /// Asymptotic covariance `𝐈⁻¹𝒵` under `n^{1/4}` normalization with `n = avar_n`, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avar: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avar_n: Option<f64>,
    #[serde(skip)]
    pub spot: SpotPath,
}

impl Default for SpotPath {
    fn default() -> Self {
        SpotPath::Constant(SymMat::zeros(0))
    }
}

impl TruthRecord {
    fn cumulative_at(&self, t: f64) -> DMatrix<f64> {
        match &self.spot {
            SpotPath::Constant(s) => s.as_matrix() * t,
            SpotPath::Grid { times, cumulative } => {
                let d = self.integrated.dim();
                let i = times.partition_point(|&x| x <= t).clamp(1, times.len() - 1);
                let (t0, t1) = (times[i - 1], times[i]);
                let w = if t1 > t0 {
                    ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let (c0, c1) = (&cumulative[i - 1], &cumulative[i]);
                DMatrix::from_fn(d, d, |p, q| {
                    let k = vec_index(p, q, d);
                    c0[k] + w * (c1[k] - c0[k])
                })
            }
        }
    }

    /// Block averages `Σ^{kh} = h⁻¹∫_{kh}^{(k+1)h}Σ`.
    pub fn block_sigma(&self, grid: &BlockGrid) -> Vec<SymMat> {
        let h = grid.h();
        (0..grid.blocks())
            .map(|k| {
                let a = self.cumulative_at(k as f64 * h);
                let b = self.cumulative_at((k + 1) as f64 * h);
                SymMat::symmetrize(&((b - a) / h))
            })
            .collect()
    }

    /// Oracle local model on `grid`: true block averages and true noise variances combined with
    /// the observed sampling times.
    pub fn local_model(&self, series: &[TickSeries], grid: &BlockGrid) -> Result<LocalModel> {
        let noise = local_noise_levels(series, grid, &self.eta2)?;
        LocalModel::with_noise(self.block_sigma(grid), &noise)
    }
}

/// Simulated ticks with their truth.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub series: Vec<TickSeries>,
    pub truth: TruthRecord,
}

fn asset_name(l: usize) -> String {
    format!("A{}", l + 1)
}

fn merged_times(per_asset: &[Vec<f64>], extra: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = per_asset.iter().flatten().chain(extra).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

fn sampling_times<R: Rng + ?Sized>(n: usize, sampling: Sampling, rng: &mut R) -> Result<Vec<f64>> {
    match sampling {
        Sampling::Equidistant => Ok((0..=n).map(|i| i as f64 / n as f64).collect()),
        Sampling::Poisson => {
            let mut t = poisson_times(n as f64, rng)?;
            // a path needs at least one increment
            if t.len() < 2 {
                t.push(1.0);
            }
            Ok(t)
        }
    }
}

fn add_noise<R: Rng + ?Sized>(values: &mut [f64], eta2: f64, rng: &mut R) {
    let eta = eta2.sqrt();
    for v in values {
        let e: f64 = StandardNormal.sample(rng);
        *v += eta * e;
    }
}

/// Noise levels `ℋ_p = η_p(ν_p F_p')^{-1/2}` under `n_min` normalization; Poisson spacings carry
/// twice the quadratic variation of time of a regular grid.
fn constant_avar(sc: &ConstantScenario) -> Result<(Vec<Vec<f64>>, f64)> {
    let n_min = *sc.n.iter().min().expect("validated") as f64;
    let factor = match sc.sampling {
        Sampling::Equidistant => 1.0,
        Sampling::Poisson => 2.0,
    };
    let h: Vec<f64> = sc
        .eta2
        .iter()
        .zip(&sc.n)
        .map(|(e, &n)| (factor * e * n_min / n as f64).sqrt())
        .collect();
    if h.iter().any(|&x| x <= 0.0) {
        return Err(Error::NonpositiveNoiseLevel(0.0));
    }
    Ok((
        asymptotic_cov(&PathSpec::constant(sc.sigma.clone(), h))?.to_rows(),
        n_min,
    ))
}

pub fn simulate_constant_with<R: Rng + ?Sized>(
    sc: &ConstantScenario,
    rng: &mut R,
) -> Result<Simulation> {
    sc.validate()?;
    let d = sc.d;
    let times: Vec<Vec<f64>> =
        sc.n.iter()
            .map(|&n| sampling_times(n, sc.sampling, rng))
            .collect::<Result<_>>()?;
    let grid = merged_times(&times, &[]);
    let root = psd_sqrt(&sc.sigma)?.into_matrix();
    // latent X on the merged grid
    let mut x = vec![vec![0.0; grid.len()]; d];
    let mut z = DVector::zeros(d);
    for i in 1..grid.len() {
        let dt = grid[i] - grid[i - 1];
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let inc = &root * &z * dt.sqrt();
        for l in 0..d {
            x[l][i] = x[l][i - 1] + inc[l];
        }
    }
    let mut series = Vec::with_capacity(d);
    for l in 0..d {
        let mut prices = sample_at(&grid, &x[l], &times[l]);
        add_noise(&mut prices, sc.eta2[l], rng);
        series.push(TickSeries::new(asset_name(l), times[l].clone(), prices)?);
    }
    let (avar, avar_n) = match constant_avar(sc) {
        Ok((a, n)) => (Some(a), Some(n)),
        Err(_) => (None, None),
    };
    let truth = TruthRecord {
        integrated: sc.sigma.clone(),
        eta2: sc.eta2.clone(),
        n: series.iter().map(TickSeries::n_increments).collect(),
        avar,
        avar_n,
        spot: SpotPath::Constant(sc.sigma.clone()),
    };
    Ok(Simulation { series, truth })
}

/// Values on `grid` read off at the (grid-contained) times `at`.
fn sample_at(grid: &[f64], values: &[f64], at: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(at.len());
    let mut i = 0;
    for &t in at {
        while grid[i] < t {
            i += 1;
        }
        out.push(values[i]);
    }
    out
}

pub fn simulate_constant(sc: &ConstantScenario, seed: u64) -> Result<Simulation> {
    simulate_constant_with(sc, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn simulate_heston_with<R: Rng + ?Sized>(
    hs: &HestonScenario,
    rng: &mut R,
) -> Result<Simulation> {
    hs.validate()?;
    let d = hs.d;
    let p = &hs.heston;
    let chol = hs.correlation_factor()?;
    let eta2 = hs.noise_variances()?;
    let c = p.season.normalizer()?;

    let mut var: Vec<f64> = match &hs.initial_variance {
        Some(v) => v.clone(),
        None => (0..d)
            .map(|l| {
                if p.psi[l] == 0.0 {
                    return Ok(p.mu[l]);
                }
                let shape = 2.0 * p.alpha[l] * p.mu[l] / (p.psi[l] * p.psi[l]);
                let scale = p.psi[l] * p.psi[l] / (2.0 * p.alpha[l]);
                let g =
                    Gamma::new(shape, scale).map_err(|e| Error::InvalidScenario(e.to_string()))?;
                Ok(g.sample(rng))
            })
            .collect::<Result<_>>()?,
    };

    let times: Vec<Vec<f64>> = p
        .counts
        .iter()
        .map(|&n| poisson_times(n, rng))
        .collect::<Result<_>>()?;
    let uniform: Vec<f64> = (0..=p.steps).map(|i| i as f64 / p.steps as f64).collect();
    let grid = merged_times(&times, &uniform);

    let mut x = vec![vec![0.0; grid.len()]; d];
    let mut cumulative = Vec::with_capacity(grid.len());
    let mut cum = vec![0.0; d * d];
    cumulative.push(cum.clone());
    let mut z = DVector::zeros(2 * d);
    let mut vol = vec![0.0; d];
    for i in 1..grid.len() {
        let t0 = grid[i - 1];
        let dt = grid[i] - t0;
        let phi = (c * p.season.raw(t0)).sqrt();
        for l in 0..d {
            vol[l] = phi * var[l].max(0.0).sqrt();
        }
        for lp in 0..d {
            for lq in 0..d {
                let corr = if lp == lq { 1.0 } else { p.rho };
                cum[vec_index(lp, lq, d)] += vol[lp] * vol[lq] * corr * dt;
            }
        }
        cumulative.push(cum.clone());
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let w = &chol * &z;
        let sdt = dt.sqrt();
        for l in 0..d {
            x[l][i] = x[l][i - 1] + vol[l] * sdt * w[l];
            let vp = var[l].max(0.0);
            var[l] += p.alpha[l] * (p.mu[l] - vp) * dt + p.psi[l] * vp.sqrt() * sdt * w[d + l];
        }
    }

    let mut series = Vec::with_capacity(d);
    for l in 0..d {
        let mut prices = sample_at(&grid, &x[l], &times[l]);
        add_noise(&mut prices, eta2[l], rng);
        if prices.len() < 2 {
            return Err(Error::EmptyAsset(asset_name(l)));
        }
        series.push(TickSeries::new(asset_name(l), times[l].clone(), prices)?);
    }
    let integrated = SymMat::symmetrize(&DMatrix::from_column_slice(d, d, &cum));
    let truth = TruthRecord {
        integrated,
        eta2,
        n: series.iter().map(TickSeries::n_increments).collect(),
        avar: None,
        avar_n: None,
        spot: SpotPath::Grid {
            times: grid,
            cumulative,
        },
    };
    Ok(Simulation { series, truth })
}

pub fn simulate_heston(hs: &HestonScenario, seed: u64) -> Result<Simulation> {
    simulate_heston_with(hs, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Realized covariance after previous-tick sampling on `points` equidistant intervals.
pub fn realized_covariance(series: &[TickSeries], points: usize) -> Result<SymMat> {
    if series.is_empty() || points == 0 {
        return Err(Error::EmptyInput);
    }
    let d = series.len();
    let sampled: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            let (t, y) = (s.times(), s.prices());
            (0..=points)
                .map(|i| {
                    let g = i as f64 / points as f64;
                    // last observation at or before g, else the first one
                    let idx = t.partition_point(|&x| x <= g + 1e-12);
                    y[idx.saturating_sub(1)]
                })
                .collect()
        })
        .collect();
    let mut rc = DMatrix::zeros(d, d);
    for i in 1..=points {
        let inc = DVector::from_fn(d, |l, _| sampled[l][i] - sampled[l][i - 1]);
        rc += &inc * inc.transpose();
    }
    Ok(SymMat::symmetrize(&rc))
}

/// Estimators compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// LMM with oracle weights from the true block averages and noise levels.
    Oracle,
    /// Two-stage LMM with pilot weights and estimated noise.
    Adaptive,
    /// Realized covariance on a grid as fine as the most active asset.
    RcAllTicks,
    /// Realized covariance on 78 intervals (five minutes in a 6.5 hour session).
    Rc5Min,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Oracle => "oracle",
            EstimatorKind::Adaptive => "adaptive",
            EstimatorKind::RcAllTicks => "rc_all_ticks",
            EstimatorKind::Rc5Min => "rc_5min",
        }
    }

    pub fn all() -> [EstimatorKind; 4] {
        [
            EstimatorKind::Oracle,
            EstimatorKind::Adaptive,
            EstimatorKind::RcAllTicks,
            EstimatorKind::Rc5Min,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub estimators: Vec<EstimatorKind>,
    pub grid: GridOverrides,
    pub options: EstimateOptions,
    pub rule: IncrementRule,
    pub reps: usize,
    pub seed: u64,
}

impl McConfig {
    pub fn new(estimators: Vec<EstimatorKind>, reps: usize, seed: u64) -> Self {
        McConfig {
            estimators,
            grid: GridOverrides::default(),
            options: EstimateOptions {
                residual: false,
                ..EstimateOptions::default()
            },
            rule: IncrementRule::Midpoint,
            reps,
            seed,
        }
    }
}

/// Deterministic per-replication generator: the master seed with stream `r`.
pub fn replication_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub estimate: SymMat,
    /// Per-entry standard errors (upper triangle, row-major) when the estimator supplies them.
    pub std_errors: Option<Vec<f64>>,
}

/// Everything a replication produced.
#[derive(Debug)]
pub struct Replication {
    pub truth: SymMat,
    pub draws: Vec<Result<Draw>>,
}

fn upper_entries(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|p| (p..d).map(move |q| (p, q))).collect()
}

fn lmm_draw(report: crate::lmm::estimator::EstimateReport) -> Draw {
    let d = report.dim();
    let se = upper_entries(d)
        .into_iter()
        .map(|(p, q)| report.std_error(p, q))
        .collect();
    Draw {
        estimate: report.estimate_mat,
        std_errors: Some(se),
    }
}

/// Runs every configured estimator on one simulated data set.
pub fn run_replication(scenario: &Scenario, config: &McConfig, r: u64) -> Result<Replication> {
    let mut rng = replication_rng(config.seed, r);
    let sim = scenario.simulate(&mut rng)?;
    let series = &sim.series;
    let grid = choose_grid(series, config.grid)?;
    let needs_spec = config
        .estimators
        .iter()
        .any(|e| matches!(e, EstimatorKind::Oracle | EstimatorKind::Adaptive));
    let spec = if needs_spec {
        Some(compute_spectral_with(series, &grid, config.rule)?)
    } else {
        None
    };
    let n_max = series
        .iter()
        .map(TickSeries::n_increments)
        .max()
        .unwrap_or(1);
    let draws = config
        .estimators
        .iter()
        .map(|kind| -> Result<Draw> {
            match kind {
                EstimatorKind::Oracle => {
                    let model = sim.truth.local_model(series, &grid)?;
                    Ok(lmm_draw(oracle_lmm(
                        spec.as_ref().expect("spectral"),
                        &model,
                        &config.options,
                    )?))
                }
                EstimatorKind::Adaptive => {
                    let eta = estimate_noise_variances(series)?;
                    let noise = local_noise_levels(series, &grid, &eta)?;
                    Ok(lmm_draw(adaptive_lmm(
                        spec.as_ref().expect("spectral"),
                        &noise,
                        &config.options,
                    )?))
                }
                EstimatorKind::RcAllTicks => Ok(Draw {
                    estimate: realized_covariance(series, n_max)?,
                    std_errors: None,
                }),
                EstimatorKind::Rc5Min => Ok(Draw {
                    estimate: realized_covariance(series, 78)?,
                    std_errors: None,
                }),
            }
        })
        .collect();
    Ok(Replication {
        truth: sim.truth.integrated,
        draws,
    })
}

/// Summary of one estimator for one matrix entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryStats {
    pub entry: [usize; 2],
    pub mean: f64,
    pub mean_truth: f64,
    /// Variance of the error `estimate − truth`, normalized by `1/R`.
    pub variance: f64,
    pub bias: f64,
    pub rmse: f64,
    /// `√n·variance`.
    pub scaled_variance: f64,
    /// Share of replications whose confidence interval covers the truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorStats {
    pub estimator: EstimatorKind,
    pub successes: usize,
    pub failures: usize,
    pub entries: Vec<EntryStats>,
}

impl EstimatorStats {
    pub fn entry(&self, p: usize, q: usize) -> Option<&EntryStats> {
        let (p, q) = (p.min(q), p.max(q));
        self.entries.iter().find(|e| e.entry == [p, q])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub seed: u64,
    pub reps: usize,
    /// Replications whose simulation itself failed.
    pub failed_simulations: usize,
    /// `n` in the `√n` rescaling (smallest expected count).
    pub n: f64,
    pub level: f64,
    pub estimators: Vec<EstimatorStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avar: Option<Vec<Vec<f64>>>,
}

impl McReport {
    pub fn get(&self, kind: EstimatorKind) -> Option<&EstimatorStats> {
        self.estimators.iter().find(|e| e.estimator == kind)
    }

    /// Long CSV `estimator,entry,statistic,value` with entries as `p-q`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record(["estimator", "entry", "statistic", "value"])
            .map_err(io)?;
        for est in &self.estimators {
            let name = est.estimator.name();
            for e in &est.entries {
                let entry = format!("{}-{}", e.entry[0] + 1, e.entry[1] + 1);
                let mut stats = vec![
                    ("mean", e.mean),
                    ("mean_truth", e.mean_truth),
                    ("variance", e.variance),
                    ("bias", e.bias),
                    ("rmse", e.rmse),
                    ("scaled_variance", e.scaled_variance),
                ];
                if let Some(c) = e.coverage {
                    stats.push(("coverage", c));
                }
                for (s, v) in stats {
                    w.write_record([name, entry.as_str(), s, &v.to_string()])
                        .map_err(io)?;
                }
            }
            w.write_record([name, "", "failures", &est.failures.to_string()])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Normalizing `n` for the `√n` rescaling.
fn scenario_n(scenario: &Scenario) -> f64 {
    match scenario {
        Scenario::Constant(c) => *c.n.iter().min().unwrap_or(&1) as f64,
        Scenario::Heston(h) => h
            .heston
            .counts
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min),
    }
}

/// Aggregates replications; failed ones are excluded and counted.
pub fn summarize(scenario: &Scenario, config: &McConfig, reps: &[Result<Replication>]) -> McReport {
    let d = scenario.dim();
    let n = scenario_n(scenario);
    let z = {
        use statrs::distribution::{ContinuousCDF, Normal};
        Normal::new(0.0, 1.0)
            .expect("standard normal")
            .inverse_cdf(0.5 + 0.5 * config.options.level)
    };
    let failed_simulations = reps.iter().filter(|r| r.is_err()).count();
    let estimators = config
        .estimators
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let ok: Vec<(&SymMat, &Draw)> = reps
                .iter()
                .filter_map(|r| r.as_ref().ok())
                .filter_map(|r| r.draws[i].as_ref().ok().map(|d| (&r.truth, d)))
                .collect();
            let m = ok.len() as f64;
            let entries = upper_entries(d)
                .into_iter()
                .enumerate()
                .map(|(e, (p, q))| {
                    let est: Vec<f64> = ok.iter().map(|(_, d)| d.estimate.get(p, q)).collect();
                    let tru: Vec<f64> = ok.iter().map(|(t, _)| t.get(p, q)).collect();
                    let err: Vec<f64> = est.iter().zip(&tru).map(|(a, b)| a - b).collect();
                    let mean = est.iter().sum::<f64>() / m;
                    let mean_truth = tru.iter().sum::<f64>() / m;
                    let bias = err.iter().sum::<f64>() / m;
                    let variance = err.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / m;
                    let rmse = (err.iter().map(|x| x * x).sum::<f64>() / m).sqrt();
                    let coverage =
                        if ok.iter().all(|(_, d)| d.std_errors.is_some()) && !ok.is_empty() {
                            let hits = ok
                                .iter()
                                .zip(&err)
                                .filter(|((_, d), x)| {
                                    x.abs() <= z * d.std_errors.as_ref().expect("checked")[e]
                                })
                                .count();
                            Some(hits as f64 / m)
                        } else {
                            None
                        };
                    EntryStats {
                        entry: [p, q],
                        mean,
                        mean_truth,
                        variance,
                        bias,
                        rmse,
                        scaled_variance: n.sqrt() * variance,
                        coverage,
                    }
                })
                .collect();
            EstimatorStats {
                estimator: kind,
                successes: ok.len(),
                failures: reps.len() - ok.len(),
                entries,
            }
        })
        .collect();
    let avar = match scenario {
        Scenario::Constant(c) => constant_avar(c).ok().map(|(a, _)| a),
        Scenario::Heston(_) => None,
    };
    McReport {
        seed: config.seed,
        reps: reps.len(),
        failed_simulations,
        n,
        level: config.options.level,
        estimators,
        avar,
    }
}

/// Runs `config.reps` independent replications in parallel; the result does not depend on the
/// number of worker threads.
pub fn run_mc(scenario: &Scenario, config: &McConfig) -> Result<McReport> {
    if config.reps < 2 {
        return Err(Error::InvalidArgument(
            "Monte Carlo needs at least 2 replications".into(),
        ));
    }
    scenario.validate()?;
    let reps: Vec<Result<Replication>> = (0..config.reps as u64)
        .into_par_iter()
        .map(|r| run_replication(scenario, config, r))
        .collect();
    for (r, rep) in reps.iter().enumerate() {
        if let Err(e) = rep {
            log::warn!("replication {r} failed: {e}");
        }
    }
    Ok(summarize(scenario, config, &reps))
}
