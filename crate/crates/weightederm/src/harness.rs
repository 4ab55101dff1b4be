//! Synthetic scenarios, experiment orchestration, and reporting.
//!
//! A scenario fixes the dimension p and sweeps the sample ratio delta:
//! each trial draws a covariance, signals, covariates, and noise from
//! per-(trial, purpose) substreams of the scenario seed, fits the weighted
//! estimator, selects the change points, and records the scaled Hausdorff
//! error and the segment count. Reports aggregate per-delta means and
//! quartiles and serialize to JSON plus plot-ready CSV.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChangePoints, Dataset, GlmKind, NoiseDist, SignalConfig, TruthMeta};
use crate::data::hausdorff;
use crate::linalg::cholesky;
use crate::loss::Loss;
use crate::rng::{substream, Purpose};
use crate::segmentation::{
    search, select_order_cv, select_penalized, OrderPriorFamily, Penalty, SearchConfig,
    SearchStrategy,
};
use crate::solver::fit_weighted_erm;
use crate::state_evolution::{
    predict_performance, solve_se, SegmentationProcedure, SeProblem, WeightScheme,
};
use crate::weights::ChangePointPrior;
use crate::{Error, Result};

/// Signal (regression matrix) generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalGenerator {
    /// Entries i.i.d. from nonzero_prob * N(0, variance_delta_mult * delta)
    /// + (1 - nonzero_prob) * point mass at zero, independently per signal.
    GaussianSparse {
        nonzero_prob: f64,
        variance_delta_mult: f64,
    },
    /// First signal dense Gaussian; each next signal keeps a coordinate
    /// with probability 1 - p_s, otherwise perturbs it by
    /// N(0, jump_variance_delta_mult * delta) and rescales so every signal
    /// keeps the base variance.
    SparseDiff {
        p_s: f64,
        base_variance: f64,
        jump_variance_delta_mult: f64,
    },
    /// Rows of the signal matrix i.i.d. N(0, delta * covariance).
    CorrelatedGaussian { covariance: Vec<Vec<f64>> },
}

impl SignalGenerator {
    /// Analytic limit of Cov(x' B) for covariances with unit diagonal.
    pub fn gamma(&self, delta: f64, segments: usize) -> Array2<f64> {
        match self {
            SignalGenerator::GaussianSparse {
                nonzero_prob,
                variance_delta_mult,
            } => Array2::eye(segments) * (nonzero_prob * variance_delta_mult * delta) / delta,
            SignalGenerator::SparseDiff {
                p_s,
                base_variance,
                jump_variance_delta_mult,
            } => {
                // corr(beta_a, beta_b) = rho^{|a-b|} with
                // rho = (1 - p_s) + p_s * nu
                let nu = (base_variance / (base_variance + jump_variance_delta_mult * delta))
                    .sqrt();
                let rho = (1.0 - p_s) + p_s * nu;
                Array2::from_shape_fn((segments, segments), |(a, b)| {
                    base_variance * rho.powi((a as i32 - b as i32).abs())
                })
            }
            SignalGenerator::CorrelatedGaussian { covariance } => {
                Array2::from_shape_fn((segments, segments), |(a, b)| covariance[a][b])
            }
        }
    }
}

/// Covariate covariance generator (scaled by 1/n at sampling time).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceKind {
    Identity,
    /// Sigma_kj = rho^{|k-j|}
    Ar1 { rho: f64 },
    /// Random orthogonal conjugation of chi-squared eigenvalues, normalized
    /// to unit diagonal.
    RandomOrthogonalChisq { df: f64 },
}

/// How the number of change points is chosen.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderSelection {
    /// k-fold cross-validation over exact-order weights.
    Cv { folds: usize },
    /// Penalized search with the scenario prior's weights.
    Penalized { prior: ChangePointPrior },
    /// Fixed number of change points with the scenario prior's weights.
    FixedOrder {
        prior: ChangePointPrior,
        changes: usize,
    },
}

/// Prior family for CV weights: exact-order uniform, optionally spaced by a
/// fraction of n.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorFamilySpec {
    ExactUniform,
    SpacedUniform { min_gap_frac: f64 },
}

impl PriorFamilySpec {
    pub fn family(&self, n: usize) -> OrderPriorFamily {
        match *self {
            PriorFamilySpec::ExactUniform => OrderPriorFamily::ExactUniform,
            PriorFamilySpec::SpacedUniform { min_gap_frac } => OrderPriorFamily::SpacedUniform {
                min_gap: ((min_gap_frac * n as f64).round() as usize).max(1),
            },
        }
    }
}

fn default_l1() -> f64 {
    0.0
}
fn default_trials() -> usize {
    10
}
fn default_strategy() -> SearchStrategy {
    SearchStrategy::Greedy
}
fn default_penalty() -> Penalty {
    Penalty::None
}
fn default_family() -> PriorFamilySpec {
    PriorFamilySpec::ExactUniform
}

/// Full description of a synthetic experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub p: usize,
    pub delta_grid: Vec<f64>,
    pub model: GlmKind,
    pub signal: SignalGenerator,
    pub covariance: CovarianceKind,
    pub noise: NoiseDist,
    /// True change point locations as fractions of n.
    pub eta_fractions: Vec<f64>,
    pub loss: Loss,
    #[serde(default = "default_l1")]
    pub l1: f64,
    pub max_signals: usize,
    #[serde(default = "default_strategy")]
    pub strategy: SearchStrategy,
    #[serde(default = "default_penalty")]
    pub penalty: Penalty,
    #[serde(default = "default_family")]
    pub cv_prior_family: PriorFamilySpec,
    pub selection: OrderSelection,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// When set, a matched theory prediction is computed per delta.
    #[serde(default)]
    pub theory: Option<TheorySpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheorySpec {
    pub mc_samples: usize,
    pub n_eval: usize,
    pub trials: usize,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Config("key 'p' must be positive".into()));
        }
        if self.delta_grid.is_empty() {
            return Err(Error::Config("key 'delta_grid' must be nonempty".into()));
        }
        for &d in &self.delta_grid {
            if !(d > 1.0) {
                return Err(Error::Config(format!(
                    "key 'delta_grid' must hold values above 1, got {d}"
                )));
            }
        }
        let mut last = 0.0;
        for &f in &self.eta_fractions {
            if f <= last || f >= 1.0 {
                return Err(Error::Config(
                    "key 'eta_fractions' must be strictly increasing inside (0, 1)".into(),
                ));
            }
            last = f;
        }
        if self.max_signals < 1 {
            return Err(Error::Config("key 'max_signals' must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("key 'trials' must be positive".into()));
        }
        if !(self.l1 >= 0.0) {
            return Err(Error::Config("key 'l1' must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.eta_fractions.len() + 1
    }
}

fn build_sigma(cfg: &ScenarioConfig) -> Array2<f64> {
    let p = cfg.p;
    match &cfg.covariance {
        CovarianceKind::Identity => Array2::eye(p),
        CovarianceKind::Ar1 { rho } => {
            Array2::from_shape_fn((p, p), |(i, j)| rho.powi((i as i32 - j as i32).abs()))
        }
        CovarianceKind::RandomOrthogonalChisq { df } => {
            // the covariance is shared by all trials of the scenario
            let mut rng = substream(cfg.seed, 0, Purpose::Covariance);
            let normal = StandardNormal;
            // random orthogonal U from Gram-Schmidt on a Gaussian matrix
            let mut u = Array2::<f64>::zeros((p, p));
            for col in 0..p {
                let mut v = Array1::from_shape_fn(p, |_| {
                    let x: f64 = normal.sample(&mut rng);
                    x
                });
                for prev in 0..col {
                    let proj = u.column(prev).dot(&v);
                    for r in 0..p {
                        v[r] -= proj * u[(r, prev)];
                    }
                }
                let norm = v.dot(&v).sqrt();
                for r in 0..p {
                    u[(r, col)] = v[r] / norm;
                }
            }
            let evals = Array1::from_shape_fn(p, |_| {
                // chi-squared with df degrees of freedom
                let mut acc = 0.0;
                for _ in 0..(*df as usize) {
                    let x: f64 = normal.sample(&mut rng);
                    acc += x * x;
                }
                acc
            });
            let mut d = Array2::<f64>::zeros((p, p));
            for i in 0..p {
                for j in 0..p {
                    let mut acc = 0.0;
                    for k in 0..p {
                        acc += u[(k, i)] * evals[k] * u[(k, j)];
                    }
                    d[(i, j)] = acc;
                }
            }
            // normalize to unit diagonal
            let scale: Vec<f64> = (0..p).map(|i| d[(i, i)].sqrt()).collect();
            Array2::from_shape_fn((p, p), |(i, j)| d[(i, j)] / (scale[i] * scale[j]))
        }
    }
}

fn sample_signals(
    cfg: &ScenarioConfig,
    delta: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Array2<f64> {
    let p = cfg.p;
    let segments = cfg.segments();
    let normal = StandardNormal;
    match &cfg.signal {
        SignalGenerator::GaussianSparse {
            nonzero_prob,
            variance_delta_mult,
        } => {
            let sd = (variance_delta_mult * delta).sqrt();
            Array2::from_shape_fn((p, segments), |_| {
                let keep: f64 = rng.random();
                if keep < *nonzero_prob {
                    let x: f64 = normal.sample(rng);
                    x * sd
                } else {
                    0.0
                }
            })
        }
        SignalGenerator::SparseDiff {
            p_s,
            base_variance,
            jump_variance_delta_mult,
        } => {
            let jump_sd = (jump_variance_delta_mult * delta).sqrt();
            let nu = (base_variance / (base_variance + jump_variance_delta_mult * delta)).sqrt();
            let mut b = Array2::<f64>::zeros((p, segments));
            for j in 0..p {
                let x: f64 = normal.sample(rng);
                b[(j, 0)] = x * base_variance.sqrt();
                for s in 1..segments {
                    let flip: f64 = rng.random();
                    b[(j, s)] = if flip < *p_s {
                        let w: f64 = normal.sample(rng);
                        nu * (b[(j, s - 1)] + w * jump_sd)
                    } else {
                        b[(j, s - 1)]
                    };
                }
            }
            b
        }
        SignalGenerator::CorrelatedGaussian { covariance } => {
            let l = covariance.len();
            let cov =
                Array2::from_shape_fn((l, l), |(a, b)| covariance[a][b] * delta);
            let chol = cholesky(&cov.view()).expect("signal covariance must be SPD");
            let mut b = Array2::<f64>::zeros((p, l));
            let mut xi = vec![0.0f64; l];
            for j in 0..p {
                for x in xi.iter_mut() {
                    *x = normal.sample(rng);
                }
                for r in 0..l {
                    let mut acc = 0.0;
                    for c in 0..=r {
                        acc += chol[(r, c)] * xi[c];
                    }
                    b[(j, r)] = acc;
                }
            }
            b
        }
    }
}

/// Change point locations at sample size n from the scenario fractions.
pub fn eta_at(fractions: &[f64], n: usize) -> Result<ChangePoints> {
    let eta: Vec<usize> = fractions
        .iter()
        .map(|&f| (f * n as f64).floor() as usize + 1)
        .collect();
    ChangePoints::new(eta, n)
}

/// Draw one dataset. Deterministic given (scenario seed, delta, trial):
/// the covariance uses a scenario-level substream, while signals,
/// covariates, and noise use per-trial substreams.
pub fn simulate(cfg: &ScenarioConfig, delta: f64, trial: u64) -> Result<Dataset> {
    cfg.validate()?;
    let n = (delta * cfg.p as f64).round() as usize;
    let eta = eta_at(&cfg.eta_fractions, n)?;
    let psi = SignalConfig::from_changepoints(&eta);
    let sigma = build_sigma(cfg);
    let chol = cholesky(&sigma.view())
        .ok_or_else(|| Error::Numeric("covariate covariance is not SPD".into()))?;

    let mut rng_b = substream(cfg.seed, trial, Purpose::Signals);
    let b = sample_signals(cfg, delta, &mut rng_b);

    let mut rng_x = substream(cfg.seed, trial, Purpose::Covariates);
    let normal = StandardNormal;
    let p = cfg.p;
    let root_n = (n as f64).sqrt();
    let mut x = Array2::<f64>::zeros((n, p));
    let mut xi = vec![0.0f64; p];
    for i in 0..n {
        for v in xi.iter_mut() {
            *v = normal.sample(&mut rng_x);
        }
        // row = chol * xi / sqrt(n)
        for r in 0..p {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += chol[(r, c)] * xi[c];
            }
            x[(i, r)] = acc / root_n;
        }
    }

    let mut rng_e = substream(cfg.seed, trial, Purpose::Noise);
    let theta = x.dot(&b);
    let y = Array1::from_shape_fn(n, |i| {
        let eps = cfg.noise.sample(&mut rng_e);
        cfg.model.link(theta[(i, psi.label(i + 1) - 1)], eps)
    });

    let mut data = Dataset::new(x, y)?;
    data.meta = Some(TruthMeta {
        eta: eta.positions().to_vec(),
        noise_sd: match (cfg.model, cfg.noise) {
            (GlmKind::Logistic, _) => None,
            (_, NoiseDist::Gaussian { sd }) => Some(sd),
            _ => None,
        },
        b_true: Some(b),
    });
    Ok(data)
}

/// Fit + segment one dataset according to the scenario's selection rule.
pub fn estimate(cfg: &ScenarioConfig, data: &Dataset, seed: u64) -> Result<crate::segmentation::SegmentationResult> {
    let n = data.n();
    let search_cfg = SearchConfig {
        max_signals: cfg.max_signals,
        penalty: cfg.penalty,
        min_gap: 1,
        strategy: cfg.strategy,
    };
    match &cfg.selection {
        OrderSelection::Cv { folds } => select_order_cv(
            data,
            cfg.loss,
            cfg.cv_prior_family.family(n),
            &search_cfg,
            *folds,
            seed,
        ),
        OrderSelection::Penalized { prior } => {
            let w = prior.marginal_weights(n)?;
            let fit = fit_weighted_erm(data, cfg.loss, &w, cfg.l1)?;
            let lm = crate::solver::loss_matrix(&fit, data, cfg.loss);
            select_penalized(&lm, &search_cfg)
        }
        OrderSelection::FixedOrder { prior, changes } => {
            let w = prior.marginal_weights(n)?;
            let fit = fit_weighted_erm(data, cfg.loss, &w, cfg.l1)?;
            let lm = crate::solver::loss_matrix(&fit, data, cfg.loss);
            search(&lm, &search_cfg, *changes)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub delta: f64,
    pub trial: u64,
    pub eta_hat: Vec<usize>,
    /// d_H(eta_hat, eta_true)/n; `None` when exactly one of the two sets is
    /// empty (the error of a size-zero estimate is not defined).
    pub hausdorff_frac: Option<f64>,
    /// Number of estimated segments.
    pub size: usize,
    pub runtime_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaAggregate {
    pub delta: f64,
    pub mean_hausdorff_frac: Option<f64>,
    pub median_hausdorff_frac: Option<f64>,
    pub p25_hausdorff_frac: Option<f64>,
    pub p75_hausdorff_frac: Option<f64>,
    pub mean_size: f64,
    pub p25_size: f64,
    pub p75_size: f64,
    pub mean_runtime_s: f64,
    pub p25_runtime_s: f64,
    pub p75_runtime_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryRow {
    pub delta: f64,
    pub mean_hausdorff_frac: Option<f64>,
    pub mean_size: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub version: String,
    pub config_digest: String,
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<DeltaAggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theory: Vec<TheoryRow>,
}

/// Linear-interpolation percentile of a sorted sample.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn aggregate(delta: f64, records: &[TrialRecord]) -> DeltaAggregate {
    let mut fracs: Vec<f64> = records.iter().filter_map(|r| r.hausdorff_frac).collect();
    fracs.sort_by(f64::total_cmp);
    let mut sizes: Vec<f64> = records.iter().map(|r| r.size as f64).collect();
    sizes.sort_by(f64::total_cmp);
    let mut times: Vec<f64> = records.iter().map(|r| r.runtime_s).collect();
    times.sort_by(f64::total_cmp);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    DeltaAggregate {
        delta,
        mean_hausdorff_frac: (!fracs.is_empty()).then(|| mean(&fracs)),
        median_hausdorff_frac: (!fracs.is_empty()).then(|| percentile(&fracs, 0.5)),
        p25_hausdorff_frac: (!fracs.is_empty()).then(|| percentile(&fracs, 0.25)),
        p75_hausdorff_frac: (!fracs.is_empty()).then(|| percentile(&fracs, 0.75)),
        mean_size: mean(&sizes),
        p25_size: percentile(&sizes, 0.25),
        p75_size: percentile(&sizes, 0.75),
        mean_runtime_s: mean(&times),
        p25_runtime_s: percentile(&times, 0.25),
        p75_runtime_s: percentile(&times, 0.75),
    }
}

fn config_digest(cfg: &ScenarioConfig) -> String {
    // FNV-1a over the canonical JSON encoding
    let json = serde_json::to_string(cfg).unwrap_or_default();
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in json.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Run every (delta, trial) cell of the scenario. Individual trial failures
/// are recorded in the report rather than aborting the sweep.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut records: Vec<TrialRecord> = Vec::new();
    let mut aggregates = Vec::new();
    let mut theory = Vec::new();
    for &delta in &cfg.delta_grid {
        let cells: Vec<TrialRecord> = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|trial| {
                let start = Instant::now();
                let outcome = simulate(cfg, delta, trial)
                    .and_then(|data| estimate(cfg, &data, cfg.seed ^ trial).map(|s| (data, s)));
                match outcome {
                    Ok((data, seg)) => {
                        let n = data.n();
                        let truth = data
                            .meta
                            .as_ref()
                            .map(|m| m.eta.clone())
                            .unwrap_or_default();
                        let frac = hausdorff(seg.eta_hat.positions(), &truth)
                            .map(|d| d / n as f64);
                        TrialRecord {
                            delta,
                            trial,
                            eta_hat: seg.eta_hat.positions().to_vec(),
                            hausdorff_frac: frac,
                            size: seg.eta_hat.segments(),
                            runtime_s: start.elapsed().as_secs_f64(),
                            error: None,
                        }
                    }
                    Err(e) => TrialRecord {
                        delta,
                        trial,
                        eta_hat: Vec::new(),
                        hausdorff_frac: None,
                        size: 0,
                        runtime_s: start.elapsed().as_secs_f64(),
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        aggregates.push(aggregate(delta, &cells));
        records.extend(cells);

        if let Some(spec) = &cfg.theory {
            theory.push(theory_row(cfg, delta, spec)?);
        }
    }
    Ok(RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config_digest(cfg),
        records,
        aggregates,
        theory,
    })
}

/// Theory prediction for one delta: solve the fixed point at the true
/// configuration and push samples of the limiting law through the same
/// segmentation procedure.
fn theory_row(cfg: &ScenarioConfig, delta: f64, spec: &TheorySpec) -> Result<TheoryRow> {
    let n = (delta * cfg.p as f64).round() as usize;
    let eta = eta_at(&cfg.eta_fractions, n)?;
    let (prior, procedure) = match &cfg.selection {
        OrderSelection::Penalized { prior } => (
            prior.clone(),
            SegmentationProcedure::Penalized {
                cfg: SearchConfig {
                    max_signals: cfg.max_signals,
                    penalty: cfg.penalty,
                    min_gap: 1,
                    strategy: cfg.strategy,
                },
            },
        ),
        OrderSelection::FixedOrder { prior, changes } => (
            prior.clone(),
            SegmentationProcedure::FixedOrder {
                cfg: SearchConfig {
                    max_signals: cfg.max_signals,
                    penalty: cfg.penalty,
                    min_gap: 1,
                    strategy: cfg.strategy,
                },
                changes: *changes,
            },
        ),
        OrderSelection::Cv { .. } => {
            return Err(Error::Config(
                "theory predictions require a loss-matrix selection rule (penalized or fixed \
                 order), not cross-validation"
                    .into(),
            ))
        }
    };
    let gamma = cfg.signal.gamma(delta, cfg.segments());
    // the finite-n marginals are the profile the empirical run actually
    // used (the continuum limit of a spaced prior with a gap tied to n is
    // not expressible without n)
    let weights = prior.marginal_weights(n)?;
    let mut problem = SeProblem::for_changepoints(
        &eta,
        delta,
        gamma,
        cfg.loss,
        cfg.model,
        cfg.noise,
        WeightScheme::Finite { matrix: weights },
    )?;
    problem.mc_samples = spec.mc_samples;
    problem.n_eval = spec.n_eval;
    problem.seed = cfg.seed;
    let params = solve_se(&problem)?;
    let pred = predict_performance(&problem, &params, &procedure, n, spec.trials, cfg.seed)?;
    Ok(TheoryRow {
        delta,
        mean_hausdorff_frac: pred.mean_hausdorff_frac,
        mean_size: pred.mean_size,
    })
}

impl RunReport {
    pub fn write_json<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    /// Plot-ready CSV: one row per (delta, metric) with mean and quartiles.
    pub fn write_plot_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "delta,mean,p25,p75,metric")?;
        for a in &self.aggregates {
            if let (Some(m), Some(lo), Some(hi)) =
                (a.mean_hausdorff_frac, a.p25_hausdorff_frac, a.p75_hausdorff_frac)
            {
                writeln!(out, "{},{m:.16e},{lo:.16e},{hi:.16e},hausdorff_frac", a.delta)?;
            }
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},size",
                a.delta, a.mean_size, a.p25_size, a.p75_size
            )?;
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},runtime_s",
                a.delta, a.mean_runtime_s, a.p25_runtime_s, a.p75_runtime_s
            )?;
        }
        Ok(())
    }
}

/// Elbow rule over a greedy objective sequence obj[k], k = 0..K: the
/// smallest change point count after which adding one more yields a smaller
/// gain than the previous insertion did. Falls back to the largest count
/// when the gains keep growing.
pub fn elbow_rule(objectives: &[f64]) -> usize {
    if objectives.len() < 3 {
        return objectives.len().saturating_sub(1);
    }
    let gains: Vec<f64> = objectives.windows(2).map(|w| w[0] - w[1]).collect();
    for k in 1..gains.len() {
        if gains[k] < gains[k - 1] {
            return k;
        }
    }
    objectives.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_scenario() -> ScenarioConfig {
        ScenarioConfig {
            name: "smoke".into(),
            p: 20,
            delta_grid: vec![10.0],
            model: GlmKind::Linear,
            signal: SignalGenerator::GaussianSparse {
                nonzero_prob: 0.5,
                variance_delta_mult: 1.0,
            },
            covariance: CovarianceKind::Identity,
            noise: NoiseDist::Gaussian { sd: 0.1 },
            eta_fractions: vec![0.5],
            loss: Loss::Squared,
            l1: 0.0,
            max_signals: 2,
            strategy: SearchStrategy::Exhaustive,
            penalty: Penalty::None,
            cv_prior_family: PriorFamilySpec::ExactUniform,
            selection: OrderSelection::Cv { folds: 5 },
            trials: 2,
            seed: 42,
            theory: None,
        }
    }

    #[test]
    fn simulation_is_deterministic_given_seed_and_trial() {
        let cfg = smoke_scenario();
        let a = simulate(&cfg, 10.0, 3).unwrap();
        let b = simulate(&cfg, 10.0, 3).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let c = simulate(&cfg, 10.0, 4).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn zero_noise_linear_reproduces_responses_exactly() {
        let mut cfg = smoke_scenario();
        cfg.noise = NoiseDist::None;
        cfg.eta_fractions = vec![];
        cfg.p = 10;
        let data = simulate(&cfg, 10.0, 0).unwrap();
        let b = data.meta.as_ref().unwrap().b_true.as_ref().unwrap().clone();
        let theta = data.x.dot(&b);
        for i in 0..data.n() {
            assert!((data.y[i] - theta[(i, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn covariate_variance_matches_ar1_diagonal() {
        // empirical column variance of x should be Sigma_jj / n
        let mut cfg = smoke_scenario();
        cfg.p = 50;
        cfg.covariance = CovarianceKind::Ar1 { rho: 0.4 };
        let delta = 40.0;
        let data = simulate(&cfg, delta, 1).unwrap();
        let n = data.n();
        let mut mean = 0.0;
        let mut worst: f64 = 0.0;
        for j in 0..cfg.p {
            let col = data.x.column(j);
            let var = col.iter().map(|v| v * v).sum::<f64>() / n as f64;
            mean += var * n as f64;
            worst = worst.max((var * n as f64 - 1.0).abs());
        }
        mean /= cfg.p as f64;
        // each column variance estimate carries sqrt(2/n) ~ 3% noise; the
        // average should sit within 2% and no column should stray far
        assert!((mean - 1.0).abs() < 0.02, "mean scaled variance {mean}");
        assert!(worst < 0.15, "worst column deviation {worst}");
    }

    #[test]
    fn ar1_off_diagonal_correlation_is_present() {
        let mut cfg = smoke_scenario();
        cfg.p = 30;
        cfg.covariance = CovarianceKind::Ar1 { rho: 0.4 };
        let data = simulate(&cfg, 60.0, 2).unwrap();
        let n = data.n() as f64;
        let mut corr = 0.0;
        for j in 0..(cfg.p - 1) {
            let a = data.x.column(j);
            let b = data.x.column(j + 1);
            let cov = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / n;
            let va = a.iter().map(|v| v * v).sum::<f64>() / n;
            let vb = b.iter().map(|v| v * v).sum::<f64>() / n;
            corr += cov / (va * vb).sqrt();
        }
        corr /= (cfg.p - 1) as f64;
        assert!((corr - 0.4).abs() < 0.05, "mean adjacent correlation {corr}");
    }

    #[test]
    fn random_orthogonal_chisq_covariance_has_unit_diagonal() {
        let mut cfg = smoke_scenario();
        cfg.p = 40;
        cfg.covariance = CovarianceKind::RandomOrthogonalChisq { df: 10.0 };
        let sigma = build_sigma(&cfg);
        for j in 0..cfg.p {
            assert!((sigma[(j, j)] - 1.0).abs() < 1e-10);
        }
        assert!(cholesky(&sigma.view()).is_some());
        // deterministic across calls (shared by trials)
        let sigma2 = build_sigma(&cfg);
        assert_eq!(sigma, sigma2);
    }

    #[test]
    fn sparse_diff_changes_expected_fraction_of_coordinates() {
        let mut cfg = smoke_scenario();
        cfg.p = 400;
        cfg.signal = SignalGenerator::SparseDiff {
            p_s: 0.3,
            base_variance: 8.0,
            jump_variance_delta_mult: 400.0,
        };
        cfg.eta_fractions = vec![0.4];
        let delta = 4.0;
        let data = simulate(&cfg, delta, 5).unwrap();
        let b = data.meta.as_ref().unwrap().b_true.as_ref().unwrap();
        let mut changed = 0;
        for j in 0..cfg.p {
            if (b[(j, 0)] - b[(j, 1)]).abs() > 1e-12 {
                changed += 1;
            }
        }
        // binomial(400, 0.3): mean 120, sd ~ 9.2; allow 4 sigma
        assert!(
            (changed as f64 - 120.0).abs() < 37.0,
            "changed {changed} of 400"
        );
        // rescaling keeps signal magnitudes comparable
        let v0 = b.column(0).iter().map(|v| v * v).sum::<f64>() / cfg.p as f64;
        let v1 = b.column(1).iter().map(|v| v * v).sum::<f64>() / cfg.p as f64;
        assert!((v0 / v1).ln().abs() < 0.5, "variances {v0} vs {v1}");
    }

    #[test]
    fn smoke_scenario_produces_valid_report() {
        let cfg = smoke_scenario();
        let start = Instant::now();
        let report = run_scenario(&cfg).unwrap();
        assert!(start.elapsed().as_secs_f64() < 10.0, "smoke run too slow");
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.aggregates.len(), 1);
        for r in &report.records {
            assert!(r.error.is_none(), "trial failed: {:?}", r.error);
            assert_eq!(r.size, 2);
        }
        // high-SNR smoke run localizes the change point exactly
        let agg = &report.aggregates[0];
        assert!(agg.mean_hausdorff_frac.unwrap() < 0.05);
    }

    #[test]
    fn report_round_trips_and_plot_csv_has_the_columns() {
        let cfg = smoke_scenario();
        let report = run_scenario(&cfg).unwrap();
        let dir = std::env::temp_dir().join("weightederm-report-test");
        std::fs::create_dir_all(&dir).unwrap();
        let json = dir.join("report.json");
        let csv = dir.join("plot.csv");
        report.write_json(&json).unwrap();
        report.write_plot_csv(&csv).unwrap();
        let back: RunReport =
            serde_json::from_reader(std::fs::File::open(&json).unwrap()).unwrap();
        assert_eq!(back.records.len(), report.records.len());
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("delta,mean,p25,p75,metric"));
        assert!(text.contains("hausdorff_frac"));
        assert!(text.contains("size"));
    }

    #[test]
    fn simulated_dataset_round_trips_csv_losslessly() {
        let cfg = smoke_scenario();
        let data = simulate(&cfg, 10.0, 0).unwrap();
        let dir = std::env::temp_dir().join("weightederm-sim-csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sim.csv");
        data.to_csv(&path).unwrap();
        let back = Dataset::from_csv(&path).unwrap();
        assert_eq!(back.x, data.x);
        assert_eq!(back.y, data.y);
    }

    #[test]
    fn elbow_rule_picks_the_gain_dropoff() {
        // gains: 10, 8, 0.5, 0.3 -> the third insertion gains less than the
        // second, and the second less than the first... smallest k with
        // gain[k+1] < gain[k] is k = 1? gains drop immediately: 8 < 10
        let obj = [20.0, 10.0, 2.0, 1.5, 1.2];
        assert_eq!(elbow_rule(&obj), 1);
        // growing then dropping gains
        let obj = [20.0, 18.0, 10.0, 9.5];
        assert_eq!(elbow_rule(&obj), 2);
        // monotone growth in gains keeps everything
        let obj = [20.0, 19.0, 17.0, 14.0];
        assert_eq!(elbow_rule(&obj), 3);
        assert_eq!(elbow_rule(&[5.0]), 0);
    }

    #[test]
    fn config_errors_name_the_offending_key() {
        let mut cfg = smoke_scenario();
        cfg.delta_grid = vec![0.5];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("delta_grid"), "{err}");
        let mut cfg = smoke_scenario();
        cfg.eta_fractions = vec![0.9, 0.2];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("eta_fractions"), "{err}");
    }
}
