use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use covolmm::efficiency::avar_grid;
use covolmm::lmm::{estimate_from_ticks, EstimateOptions};
use covolmm::marketdata::{load_csv_path, write_csv, GridOverrides};
use covolmm::simkit::{replication_rng, run_mc, EstimatorKind, McConfig, Scenario};
use covolmm::spectral::IncrementRule;

#[derive(Parser, Debug)]
#[command(
    name = "covolmm",
    version,
    about = "Integrated covariance estimation from noisy asynchronous ticks"
)]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the integrated covariance from a tick CSV (`asset,time,price`).
    Estimate(EstimateArgs),
    /// Simulate ticks for a scenario JSON; writes the tick CSV and a truth JSON.
    Simulate(SimulateArgs),
    /// Monte Carlo study of one scenario.
    Mc(McArgs),
    /// Asymptotic variance table over a correlation x noise-level grid.
    Avar(AvarArgs),
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Number of blocks 1/h.
    #[arg(long)]
    blocks: Option<usize>,
    /// Spectral frequencies J per block.
    #[arg(long)]
    freqs: Option<usize>,
    /// Number of coarse noise blocks 1/r.
    #[arg(long)]
    coarse: Option<usize>,
    /// Pilot window K in blocks.
    #[arg(long)]
    pilot_window: Option<usize>,
    /// Confidence level of the reported intervals.
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    level: f64,
    /// Project the estimate onto the positive semidefinite cone.
    #[arg(long)]
    psd_project: bool,
    /// Split increments that straddle block boundaries instead of assigning them by midpoint.
    #[arg(long)]
    split_increments: bool,
}

impl GridArgs {
    fn overrides(&self) -> GridOverrides {
        GridOverrides {
            blocks: self.blocks,
            freqs: self.freqs,
            coarse: self.coarse,
        }
    }

    fn options(&self) -> EstimateOptions {
        EstimateOptions {
            level: self.level,
            psd_project: self.psd_project,
            pilot_window: self.pilot_window,
            ..EstimateOptions::default()
        }
    }

    fn rule(&self) -> IncrementRule {
        if self.split_increments {
            IncrementRule::Split
        } else {
            IncrementRule::Midpoint
        }
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Tick CSV.
    #[arg(long)]
    input: PathBuf,
    /// Report JSON (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Raw clock bounds mapped to [0, 1].
    #[arg(long, num_args = 2, value_names = ["T0", "T1"], allow_negative_numbers = true)]
    time_span: Option<Vec<f64>>,
    /// Also dump the spectral statistics as CSV (`j,k,component,value`).
    #[arg(long)]
    spectral_csv: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    input: PathBuf,
    /// Tick CSV.
    #[arg(long)]
    output: PathBuf,
    /// Truth JSON (default: the output path with extension `truth.json`).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Oracle,
    Adaptive,
    RcAllTicks,
    Rc5min,
}

impl From<EstimatorArg> for EstimatorKind {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Oracle => EstimatorKind::Oracle,
            EstimatorArg::Adaptive => EstimatorKind::Adaptive,
            EstimatorArg::RcAllTicks => EstimatorKind::RcAllTicks,
            EstimatorArg::Rc5min => EstimatorKind::Rc5Min,
        }
    }
}

#[derive(Args, Debug)]
struct McArgs {
    /// Scenario JSON.
    #[arg(long)]
    input: PathBuf,
    /// Report JSON (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Long-format CSV of the same report.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimators to compare (default: all).
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<EstimatorArg>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug)]
struct AvarArgs {
    /// CSV table (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Correlations (default 0, 0.1, ..., 1).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    rho: Vec<f64>,
    /// Second-asset noise levels with the first fixed at 1 (default 0.1, 0.2, ..., 2).
    #[arg(long, value_delimiter = ',')]
    eta2: Vec<f64>,
}

fn parse_level(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("level must lie in (0, 1), got {v}"))
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<covolmm::Error> for CliError {
    fn from(e: covolmm::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Writes through a temporary file in the target directory and renames it into place.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> CliResult) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut buf = io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn write_output(path: Option<&Path>, fill: impl FnOnce(&mut dyn Write) -> CliResult) -> CliResult {
    match path {
        Some(p) => write_atomic(p, fill),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            fill(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> CliResult {
    write_output(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn read_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Scenario::from_json(&text)?)
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult {
    let span = match args.time_span.as_deref() {
        Some([t0, t1]) if t1 > t0 => Some((*t0, *t1)),
        Some(_) => return Err(CliError::Usage("--time-span needs t0 < t1".into())),
        None => None,
    };
    let series = load_csv_path(&args.input, span)?;
    let out = estimate_from_ticks(
        &series,
        args.grid.overrides(),
        &args.grid.options(),
        args.grid.rule(),
    )?;
    let diag = &out.report.diagnostics;
    eprintln!("d = {}", out.report.dim());
    for (name, n) in diag.assets.iter().zip(&diag.n_per_asset) {
        eprintln!("n[{name}] = {n}");
    }
    eprintln!(
        "grid: 1/h = {}, J = {}, 1/r = {}, K = {}",
        out.grid.blocks(),
        out.grid.freqs(),
        out.grid.coarse(),
        diag.pilot_window.map_or("-".to_string(), |k| k.to_string())
    );
    match diag.truncation_residual {
        Some(r) => eprintln!("truncation residual = {r:.3e}"),
        None => eprintln!("truncation residual = n/a"),
    }
    if let Some(p) = &diag.pilot {
        if p.floored_blocks > 0 {
            warn!(
                "pilot covariance was eigenvalue-floored in {} blocks",
                p.floored_blocks
            );
        }
    }
    if let Some(path) = &args.spectral_csv {
        write_atomic(path, |w| Ok(out.spectral.write_csv(w)?))?;
    }
    write_json(args.output.as_deref(), &out.report.to_json())
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult {
    let scenario = read_scenario(&args.input)?;
    let sim = scenario.simulate(&mut replication_rng(args.seed, 0))?;
    info!("simulated {} assets", sim.series.len());
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| args.output.with_extension("truth.json"));
    write_atomic(&args.output, |w| Ok(write_csv(w, &sim.series)?))?;
    write_json(Some(&truth_path), &serde_json::to_value(&sim.truth)?)
}

fn cmd_mc(args: &McArgs) -> CliResult {
    let scenario = read_scenario(&args.input)?;
    let estimators: Vec<EstimatorKind> = if args.estimators.is_empty() {
        EstimatorKind::all().to_vec()
    } else {
        args.estimators.iter().map(|&e| e.into()).collect()
    };
    let mut cfg = McConfig::new(estimators, args.reps, args.seed);
    cfg.grid = args.grid.overrides();
    cfg.options = EstimateOptions {
        residual: false,
        ..args.grid.options()
    };
    cfg.rule = args.grid.rule();
    let report = run_mc(&scenario, &cfg)?;
    for est in &report.estimators {
        info!(
            "{}: {} successes, {} failures",
            est.estimator.name(),
            est.successes,
            est.failures
        );
    }
    if let Some(path) = &args.csv {
        write_atomic(path, |w| Ok(report.write_csv(w)?))?;
    }
    write_json(args.output.as_deref(), &serde_json::to_value(&report)?)
}

fn default_grid(lo: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| ((lo + step * i as f64) * 1e10).round() / 1e10)
        .collect()
}

fn cmd_avar(args: &AvarArgs) -> CliResult {
    let rhos = if args.rho.is_empty() {
        default_grid(0.0, 0.1, 11)
    } else {
        args.rho.clone()
    };
    let eta2s = if args.eta2.is_empty() {
        default_grid(0.1, 0.1, 20)
    } else {
        args.eta2.clone()
    };
    let rows = avar_grid(&rhos, &eta2s)?;
    write_output(args.output.as_deref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        for row in &rows {
            wtr.serialize(row)
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    })
}

fn run(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mc(a) => cmd_mc(a),
        Command::Avar(a) => cmd_avar(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COVOLMM_LOG", "warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
