//! Command-line interface: simulate datasets, fit the weighted estimator,
//! segment, solve the fixed-point system, compute posteriors, and run
//! benchmark sweeps. All subcommands read a JSON config and write their
//! outputs under --out; identical (config, seed) pairs produce identical
//! outputs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use weightederm::data::{Dataset, GlmKind, NoiseDist};
use weightederm::error::Error;
use weightederm::harness::{self, PriorFamilySpec, ScenarioConfig};
use weightederm::inference::{
    adjust, enumerate_support, estimate_gamma, estimate_noise_variance, posterior,
};
use weightederm::loss::Loss;
use weightederm::segmentation::{
    search, select_order_cv, Penalty, SearchConfig, SearchStrategy, SegmentationResult,
};
use weightederm::solver::fit_weighted_erm;
use weightederm::state_evolution::{solve_se, SeProblem, WeightScheme};
use weightederm::weights::ChangePointPrior;

#[derive(Parser)]
#[command(
    name = "weightederm",
    version,
    about = "Change point estimation in high-dimensional GLMs via weighted empirical risk \
             minimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Primary output format where a choice exists.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one synthetic dataset and write it as CSV plus a truth sidecar.
    Simulate,
    /// Fit the weighted estimator and write the fit as JSON.
    Fit,
    /// Select the number of change points by cross-validation and segment.
    Segment,
    /// Solve the fixed-point system for a problem description.
    SeSolve,
    /// Compute the posterior over change point configurations.
    Posterior,
    /// Run a scenario sweep and write the report plus plot data.
    Bench,
}

#[derive(Deserialize)]
struct SimulateConfig {
    scenario: ScenarioConfig,
    delta: f64,
    #[serde(default)]
    trial: u64,
}

fn default_l1() -> f64 {
    0.0
}

#[derive(Deserialize)]
struct FitConfig {
    data: PathBuf,
    loss: Loss,
    prior: ChangePointPrior,
    #[serde(default = "default_l1")]
    l1: f64,
}

fn default_folds() -> usize {
    5
}
fn default_min_gap() -> usize {
    1
}
fn default_strategy() -> SearchStrategy {
    SearchStrategy::Greedy
}
fn default_family() -> PriorFamilySpec {
    PriorFamilySpec::ExactUniform
}

#[derive(Deserialize)]
struct SegmentConfig {
    data: PathBuf,
    loss: Loss,
    max_signals: usize,
    #[serde(default = "default_folds")]
    folds: usize,
    #[serde(default = "default_min_gap")]
    min_gap: usize,
    #[serde(default = "default_strategy")]
    strategy: SearchStrategy,
    #[serde(default = "default_family")]
    prior_family: PriorFamilySpec,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
struct PosteriorConfig {
    data: PathBuf,
    /// Truth sidecar with noise metadata, when available.
    meta: Option<PathBuf>,
    loss: Loss,
    model: GlmKind,
    prior: ChangePointPrior,
    /// Known signal strength matrix; estimated from data when absent.
    gamma: Option<Vec<Vec<f64>>>,
    /// Known noise standard deviation; estimated when absent.
    noise_sd: Option<f64>,
    /// Downsample candidate locations to this many grid points per
    /// coordinate (required above n = 2000 for multi-change supports).
    grid_points: Option<usize>,
    #[serde(default)]
    mc_samples: Option<usize>,
    #[serde(default)]
    n_eval: Option<usize>,
    #[serde(default)]
    seed: u64,
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<T, Error> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required for this subcommand".into()))?;
    let file = std::fs::File::open(path)?;
    serde_json::from_reader(file).map_err(Error::from)
}

fn segment_output(result: &SegmentationResult) -> serde_json::Value {
    serde_json::json!({
        "eta_hat": result.eta_hat.positions(),
        "l_hat": result.eta_hat.segments(),
        "objective": result.objective,
        "cv_table": result.cv_table,
    })
}

fn run(cli: &Cli) -> Result<(), Error> {
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Simulate => {
            let mut cfg: SimulateConfig = load_config(&cli.config)?;
            if let Some(seed) = cli.seed {
                cfg.scenario.seed = seed;
            }
            let data = harness::simulate(&cfg.scenario, cfg.delta, cfg.trial)?;
            data.to_csv(cli.out.join("dataset.csv"))?;
            data.write_meta(cli.out.join("dataset.meta.json"))?;
            eprintln!(
                "wrote dataset.csv ({} x {}) and dataset.meta.json",
                data.n(),
                data.p()
            );
            Ok(())
        }
        Command::Fit => {
            let cfg: FitConfig = load_config(&cli.config)?;
            let data = Dataset::from_csv(&cfg.data)?;
            let weights = cfg.prior.marginal_weights(data.n())?;
            let fit = fit_weighted_erm(&data, cfg.loss, &weights, cfg.l1)?;
            let file = std::fs::File::create(cli.out.join("fit.json"))?;
            serde_json::to_writer_pretty(file, &fit)?;
            eprintln!("wrote fit.json ({} columns)", fit.b_hat.ncols());
            Ok(())
        }
        Command::Segment => {
            let mut cfg: SegmentConfig = load_config(&cli.config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let data = Dataset::from_csv(&cfg.data)?;
            let search_cfg = SearchConfig {
                max_signals: cfg.max_signals,
                penalty: Penalty::None,
                min_gap: cfg.min_gap,
                strategy: cfg.strategy,
            };
            let result = select_order_cv(
                &data,
                cfg.loss,
                cfg.prior_family.family(data.n()),
                &search_cfg,
                cfg.folds,
                cfg.seed,
            )?;
            let file = std::fs::File::create(cli.out.join("segment.json"))?;
            serde_json::to_writer_pretty(file, &segment_output(&result))?;
            eprintln!(
                "wrote segment.json (eta_hat = {:?})",
                result.eta_hat.positions()
            );
            Ok(())
        }
        Command::SeSolve => {
            let mut problem: SeProblem = load_config(&cli.config)?;
            if let Some(seed) = cli.seed {
                problem.seed = seed;
            }
            let params = solve_se(&problem)?;
            let file = std::fs::File::create(cli.out.join("se_params.json"))?;
            serde_json::to_writer_pretty(file, &params)?;
            eprintln!("wrote se_params.json (b = {:?})", params.b);
            Ok(())
        }
        Command::Posterior => {
            let mut cfg: PosteriorConfig = load_config(&cli.config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let mut data = Dataset::from_csv(&cfg.data)?;
            if let Some(meta) = &cfg.meta {
                data.read_meta(meta)?;
            }
            let n = data.n();
            let weights = cfg.prior.marginal_weights(n)?;
            let fit = fit_weighted_erm(&data, cfg.loss, &weights, 0.0)?;
            let adjusted = adjust(&fit, &data, cfg.loss, &weights)?;

            let noise_var = cfg
                .noise_sd
                .map(|s| s * s)
                .or_else(|| data.meta.as_ref().and_then(|m| m.noise_sd).map(|s| s * s))
                .unwrap_or_else(|| estimate_noise_variance(&fit, &data, &weights));
            let noise = match cfg.model {
                GlmKind::Logistic => NoiseDist::Uniform01,
                GlmKind::Linear => NoiseDist::Gaussian {
                    sd: noise_var.sqrt(),
                },
            };
            let l = weights.signals();
            let mut base = SeProblem {
                delta: data.delta(),
                gamma: ndarray::Array2::eye(l),
                loss: cfg.loss,
                model: cfg.model,
                noise,
                boundaries: vec![0.0, 1.0],
                labels: vec![1],
                weights: WeightScheme::Finite {
                    matrix: weights.clone(),
                },
                n_eval: cfg.n_eval.unwrap_or(256),
                mc_samples: cfg.mc_samples.unwrap_or(50_000),
                seed: cfg.seed,
            };
            base.gamma = match &cfg.gamma {
                Some(rows) => ndarray::Array2::from_shape_fn((l, l), |(i, j)| rows[i][j]),
                None => {
                    // segment at the prior's own order, then solve the
                    // augmented system for the signal strength
                    let lm = weightederm::solver::loss_matrix(&fit, &data, cfg.loss);
                    let search_cfg = SearchConfig {
                        max_signals: l,
                        penalty: Penalty::None,
                        min_gap: 1,
                        strategy: SearchStrategy::Exhaustive,
                    };
                    let seg = search(&lm, &search_cfg, l - 1)?;
                    let est = estimate_gamma(&adjusted, &data, &base, &seg.psi_hat)?;
                    if let Some(w) = &est.warning {
                        eprintln!("warning: {w}");
                    }
                    est.gamma
                }
            };
            let support = enumerate_support(&cfg.prior, n, cfg.grid_points)?;
            let table = posterior(&adjusted, &data, &cfg.prior, &base, &support, noise_var)?;
            table.write_marginal_csv(cli.out.join("posterior.csv"))?;
            let file = std::fs::File::create(cli.out.join("posterior.json"))?;
            serde_json::to_writer_pretty(file, &table)?;
            eprintln!(
                "wrote posterior.csv and posterior.json ({} configurations)",
                table.entries.len()
            );
            Ok(())
        }
        Command::Bench => {
            let mut cfg: ScenarioConfig = load_config(&cli.config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let report = harness::run_scenario(&cfg)?;
            report.write_json(cli.out.join("report.json"))?;
            report.write_plot_csv(cli.out.join("plot.csv"))?;
            if matches!(cli.format, Format::Json) {
                println!("{}", serde_json::to_string_pretty(&report.aggregates)?);
            }
            eprintln!(
                "wrote report.json and plot.csv ({} trials)",
                report.records.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses exit code 2 for usage errors; this tool reserves 2
            // for numeric failures and reports usage problems as 1
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
