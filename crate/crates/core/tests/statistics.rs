//! Seeded Monte Carlo checks of the building blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use covolmm::lmm::{bias_jk, cjk, estimate_from_ticks, EstimateOptions, LocalModel};
use covolmm::marketdata::{local_noise_levels, BlockGrid, GridOverrides, TickSeries};
use covolmm::mattensor::SymMat;
use covolmm::simkit::{
    poisson_times, realized_covariance, replication_rng, run_mc, simulate_constant,
    ConstantScenario, EstimatorKind, HestonScenario, McConfig, Scenario, SeasonalShape,
};
use covolmm::spectral::{compute_spectral, E2Sampler, IncrementRule};

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

#[test]
fn e2_sampler_reproduces_block_covariance() {
    let grid = BlockGrid::fine(5, 30).unwrap();
    let model =
        LocalModel::constant(SymMat::equicorrelated(2, 1.0, 0.6), vec![2e-5, 5e-5], 5).unwrap();
    let sampler = E2Sampler::new(&model, &grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reps = 20_000;
    let draws: Vec<_> = (0..reps).map(|_| sampler.sample(&mut rng)).collect();
    for (j, k) in [(1, 0), (10, 2), (30, 4)] {
        let c = cjk(&model, j, k, &grid);
        for (p, q) in [(0, 0), (0, 1), (1, 1)] {
            let prods: Vec<f64> = draws
                .iter()
                .map(|s| s.get(j, k)[p] * s.get(j, k)[q])
                .collect();
            let (m, sd) = mean_sd(&prods);
            let z = (m - c.get(p, q)).abs() / (sd / (reps as f64).sqrt());
            assert!(
                z < 4.0,
                "j={j} k={k} ({p},{q}): {m} vs {} ({z:.2} SE)",
                c.get(p, q)
            );
        }
    }
}

#[test]
fn pure_noise_statistics_match_the_noise_bias() {
    let n = 5_000;
    let eta2: f64 = 0.04;
    let grid = BlockGrid::fine(10, 5).unwrap();
    let times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut total, mut expect) = (0.0, 0.0);
    for _ in 0..400 {
        let prices: Vec<f64> = (0..=n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                eta2.sqrt() * z
            })
            .collect();
        let series = TickSeries::new("A", times.clone(), prices).unwrap();
        let noise = local_noise_levels(std::slice::from_ref(&series), &grid, &[eta2]).unwrap();
        let spec = compute_spectral(&[series], &grid).unwrap();
        for k in 0..grid.blocks() {
            for j in 1..=grid.freqs() {
                total += spec.get(j, k)[0].powi(2);
                expect += bias_jk(noise.block(k), j, grid.h()).get(0, 0);
            }
        }
    }
    assert!(
        (total / expect - 1.0).abs() < 0.05,
        "ratio {}",
        total / expect
    );
}

#[test]
fn poisson_counts_have_the_requested_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let counts: Vec<f64> = (0..4000)
        .map(|_| (poisson_times(500.0, &mut rng).unwrap().len() - 1) as f64)
        .collect();
    let (m, sd) = mean_sd(&counts);
    assert!((m - 500.0).abs() < 3.0 * sd / (4000f64).sqrt(), "mean {m}");
    // Poisson dispersion
    assert!((sd * sd / 500.0 - 1.0).abs() < 0.1);
}

#[test]
fn realized_covariance_converges_without_noise() {
    let mut sc = ConstantScenario::two_asset(0.7, 100_000);
    sc.eta2 = vec![1e-14, 1e-14];
    let sim = simulate_constant(&sc, 4).unwrap();
    let rc = realized_covariance(&sim.series, 100_000).unwrap();
    for (p, q) in [(0, 0), (0, 1), (1, 1)] {
        assert!((rc.get(p, q) - sim.truth.integrated.get(p, q)).abs() < 0.02);
    }
}

#[test]
fn adaptive_estimate_is_close_to_truth_on_long_samples() {
    let sc = ConstantScenario::two_asset(0.4, 50_000);
    let sim = simulate_constant(&sc, 5).unwrap();
    let out = estimate_from_ticks(
        &sim.series,
        GridOverrides::default(),
        &EstimateOptions::default(),
        IncrementRule::Midpoint,
    )
    .unwrap();
    for (p, q) in [(0, 0), (0, 1), (1, 1)] {
        let err = out.report.estimate_mat.get(p, q) - sim.truth.integrated.get(p, q);
        assert!(
            err.abs() < 4.0 * out.report.std_error(p, q),
            "({p},{q}) error {err}"
        );
    }
}

#[test]
fn monte_carlo_is_independent_of_thread_count() {
    let sc = Scenario::Constant(ConstantScenario::two_asset(0.5, 1_000));
    let cfg = McConfig::new(EstimatorKind::all().to_vec(), 24, 77);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| serde_json::to_string(&run_mc(&sc, &cfg).unwrap()).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn replication_streams_are_distinct_and_reproducible() {
    use rand::Rng;
    let a: u64 = replication_rng(9, 0).random();
    let b: u64 = replication_rng(9, 1).random();
    assert_ne!(a, b);
    assert_eq!(a, replication_rng(9, 0).random::<u64>());
}

#[test]
fn heston_noise_matches_stationary_moments() {
    let hs = HestonScenario::two_asset(0.3, [1000.0, 1000.0]);
    let (mu, alpha, psi) = (1.0, 6.0, 0.3);
    let fourth = mu * mu + psi * psi * mu / (2.0 * alpha);
    assert!((hs.stationary_fourth_moment(0) - fourth).abs() < 1e-12);
    // ∫φ⁴ by a fine midpoint rule
    let shape = SeasonalShape::default();
    let m = 200_000;
    let phi4: f64 = (0..m)
        .map(|i| shape.phi_sq((i as f64 + 0.5) / m as f64).unwrap().powi(2))
        .sum::<f64>()
        / m as f64;
    let eta2 = hs.noise_variances().unwrap();
    let expect = (0.1 * (fourth * phi4).powf(0.25)).powi(2);
    assert!((eta2[0] / expect - 1.0).abs() < 1e-8);
}

#[test]
fn seasonal_shape_integrates_to_one() {
    let shape = SeasonalShape::default();
    let m = 200_000;
    let total: f64 = (0..m)
        .map(|i| shape.phi_sq((i as f64 + 0.5) / m as f64).unwrap())
        .sum::<f64>()
        / m as f64;
    assert!((total - 1.0).abs() < 1e-8);
}
