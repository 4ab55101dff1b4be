//! Posterior inference over change point configurations.
//!
//! The fitted predictors are adjusted by a rescaled gradient step,
//! theta_adj = theta_hat + b_hat * pi .* M'(theta_hat, y), where b_hat
//! solves the empirical trace equation. The adjusted rows behave like
//! Z Lambda + G with G ~ N(0, K), which gives a computable likelihood for
//! each candidate configuration and hence a posterior once a prior over
//! configurations is supplied. The same moment identity, read in reverse,
//! estimates the signal strength matrix Gamma from data.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChangePoints, Dataset, GlmKind, SignalConfig};
use crate::linalg::{cholesky, gauss_hermite, log_sum_exp, solve_general, solve_lower, spd_clip};
use crate::loss::{sigmoid, Loss};
use crate::solver::FitResult;
use crate::state_evolution::{solve_se, SeParams, SeProblem};
use crate::weights::{ChangePointPrior, WeightMatrix};
use crate::{Error, Result};

const B_HAT_RESIDUAL_TOL: f64 = 1e-10;
const GAMMA_RESIDUAL_WARN: f64 = 0.1;

/// Adjusted linear predictors and the empirical trace-equation roots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjustedEstimates {
    /// n x L matrix theta_adj.
    pub theta_adj: Array2<f64>,
    /// Per-column roots of the empirical trace equation.
    pub b_hat: Vec<f64>,
}

/// Root of (1/n) sum_i (1 + b pi_i M''(theta_i, y_i))^{-1} = 1 - 1/delta.
/// The left side decreases from 1 as b grows, so bisection applies.
fn solve_b_hat(
    theta: &ArrayView1<f64>,
    y: &ArrayView1<f64>,
    w: &ArrayView1<f64>,
    loss: Loss,
    delta: f64,
) -> Result<f64> {
    let n = theta.len();
    let curv: Vec<f64> = (0..n).map(|i| w[i] * loss.duu(theta[i], y[i])).collect();
    let value =
        |b: f64| -> f64 { curv.iter().map(|&c| 1.0 / (1.0 + b * c)).sum::<f64>() / n as f64 };
    let target = 1.0 - 1.0 / delta;
    let (mut lo, mut hi) = (1e-8, 1e8);
    if value(hi) > target {
        return Err(Error::EstimatorNonexistent(format!(
            "empirical trace equation stays above {target:.6} for every b up to 1e8; too many \
             samples carry zero curvature"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if value(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (value((lo * hi).sqrt()) - target).abs() <= B_HAT_RESIDUAL_TOL {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Adjusted estimates: theta_adj(l) = theta_hat(l) + b_hat(l) * m'(theta, y)
/// with the weighted gradient m' = pi .* M'.
pub fn adjust(
    fit: &FitResult,
    data: &Dataset,
    loss: Loss,
    weights: &WeightMatrix,
) -> Result<AdjustedEstimates> {
    let n = data.n();
    let delta = data.delta();
    if delta <= 1.0 {
        return Err(Error::Config(format!("adjustment needs n/p > 1, got {delta}")));
    }
    if fit.theta_hat.nrows() != n || weights.n() != n {
        return Err(Error::Validation(
            "fit, data, and weights disagree on the sample count".into(),
        ));
    }
    let l_total = fit.theta_hat.ncols();
    let mut theta_adj = Array2::<f64>::zeros((n, l_total));
    let mut b_hat = Vec::with_capacity(l_total);
    for col in 0..l_total {
        let theta = fit.theta_hat.column(col);
        let w = weights.matrix().column(col);
        let b = solve_b_hat(&theta, &data.y.view(), &w, loss, delta)?;
        for i in 0..n {
            theta_adj[(i, col)] = theta[i] + b * w[i] * loss.du(theta[i], data.y[i]);
        }
        b_hat.push(b);
    }
    Ok(AdjustedEstimates { theta_adj, b_hat })
}

/// Plug-in noise variance for the linear likelihood when none is known: the
/// weighted mean squared residual of the best-fitting column, inflated by
/// the proportional-regime degrees-of-freedom factor 1/(1 - 1/delta).
pub fn estimate_noise_variance(fit: &FitResult, data: &Dataset, weights: &WeightMatrix) -> f64 {
    let n = data.n();
    let mut best = f64::INFINITY;
    for col in 0..fit.theta_hat.ncols() {
        let w = weights.matrix().column(col);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let r = data.y[i] - fit.theta_hat[(i, col)];
            num += w[i] * r * r;
            den += w[i];
        }
        if den > 0.0 {
            best = best.min(num / den);
        }
    }
    best / (1.0 - 1.0 / data.delta())
}

/// Likelihood of one adjusted row (v, u) given the signal label of its
/// sample, prepared once per candidate configuration's solved parameters.
pub struct ConfigLikelihood {
    model: GlmKind,
    signals: usize,
    /// linear model: Cholesky factor and log-determinant of the joint
    /// (L+1)-dimensional covariance, per label
    joint: Vec<(Array2<f64>, f64)>,
    /// logistic model: Cholesky of Cov(V) and its logdet
    v_chol: Option<(Array2<f64>, f64)>,
    /// logistic model: conditional coefficients and sd of z_psi | V per label
    cond: Vec<(Array1<f64>, f64)>,
    gh: (Vec<f64>, Vec<f64>),
    /// set when a singular covariance needed a ridge
    pub ridged: bool,
}

impl ConfigLikelihood {
    pub fn new(params: &SeParams, problem: &SeProblem, noise_var: f64) -> Result<Self> {
        let l = problem.signals();
        let lambda = &params.lambda;
        let kpsd = params.kappa_psd();
        // Cov(V) = Lambda' Gamma Lambda + K
        let gl = problem.gamma.dot(lambda);
        let mut sigma_v = lambda.t().dot(&gl) + &kpsd;
        // Cov(V, z_psi) columns: Lambda' Gamma e_psi
        let cov_vz = lambda.t().dot(&problem.gamma);

        let mut ridged = false;
        let ridge = |m: &mut Array2<f64>, flag: &mut bool| {
            let tr: f64 = (0..m.nrows()).map(|j| m[(j, j)]).sum();
            for j in 0..m.nrows() {
                m[(j, j)] += 1e-10 * tr.max(1e-10);
            }
            *flag = true;
        };

        match problem.model {
            GlmKind::Linear => {
                let mut joint = Vec::with_capacity(l);
                for label in 1..=l {
                    let mut cov = Array2::<f64>::zeros((l + 1, l + 1));
                    for i in 0..l {
                        for j in 0..l {
                            cov[(i, j)] = sigma_v[(i, j)];
                        }
                        cov[(i, l)] = cov_vz[(i, label - 1)];
                        cov[(l, i)] = cov_vz[(i, label - 1)];
                    }
                    cov[(l, l)] = problem.gamma[(label - 1, label - 1)] + noise_var;
                    let chol = match cholesky(&cov.view()) {
                        Some(c) => c,
                        None => {
                            ridge(&mut cov, &mut ridged);
                            cholesky(&cov.view()).ok_or_else(|| {
                                Error::Numeric(
                                    "joint covariance is singular even after the ridge".into(),
                                )
                            })?
                        }
                    };
                    let logdet = 2.0 * (0..=l).map(|j| chol[(j, j)].ln()).sum::<f64>();
                    joint.push((chol, logdet));
                }
                Ok(ConfigLikelihood {
                    model: GlmKind::Linear,
                    signals: l,
                    joint,
                    v_chol: None,
                    cond: Vec::new(),
                    gh: (Vec::new(), Vec::new()),
                    ridged,
                })
            }
            GlmKind::Logistic => {
                let chol = match cholesky(&sigma_v.view()) {
                    Some(c) => c,
                    None => {
                        ridge(&mut sigma_v, &mut ridged);
                        cholesky(&sigma_v.view()).ok_or_else(|| {
                            Error::Numeric("Cov(V) is singular even after the ridge".into())
                        })?
                    }
                };
                let logdet = 2.0 * (0..l).map(|j| chol[(j, j)].ln()).sum::<f64>();
                let mut cond = Vec::with_capacity(l);
                for label in 1..=l {
                    // z_psi | V = v is Gaussian with mean a'v and variance
                    // gamma_psi,psi - c' SigmaV^{-1} c
                    let c: Array1<f64> = Array1::from_iter((0..l).map(|i| cov_vz[(i, label - 1)]));
                    let half = solve_lower(&chol.view(), &c.view());
                    let a = crate::linalg::solve_lower_transpose(&chol.view(), &half.view());
                    let var = (problem.gamma[(label - 1, label - 1)]
                        - half.iter().map(|h| h * h).sum::<f64>())
                    .max(1e-12);
                    cond.push((a, var.sqrt()));
                }
                Ok(ConfigLikelihood {
                    model: GlmKind::Logistic,
                    signals: l,
                    joint: Vec::new(),
                    v_chol: Some((chol, logdet)),
                    cond,
                    gh: gauss_hermite(32),
                    ridged,
                })
            }
        }
    }

    /// Log-likelihood of one row.
    pub fn loglik(&self, v: &ArrayView1<f64>, u: f64, label: usize) -> f64 {
        let l = self.signals;
        match self.model {
            GlmKind::Linear => {
                let (chol, logdet) = &self.joint[label - 1];
                let mut x = Array1::<f64>::zeros(l + 1);
                for j in 0..l {
                    x[j] = v[j];
                }
                x[l] = u;
                let half = solve_lower(&chol.view(), &x.view());
                let quad: f64 = half.iter().map(|h| h * h).sum();
                -0.5 * (quad + logdet + (l as f64 + 1.0) * (2.0 * std::f64::consts::PI).ln())
            }
            GlmKind::Logistic => {
                let (chol, logdet) = self.v_chol.as_ref().unwrap();
                let half = solve_lower(&chol.view(), v);
                let quad: f64 = half.iter().map(|h| h * h).sum();
                let log_phi = -0.5 * (quad + logdet + l as f64 * (2.0 * std::f64::consts::PI).ln());
                let (a, sd) = &self.cond[label - 1];
                let mean: f64 = a.iter().zip(v.iter()).map(|(ai, vi)| ai * vi).sum();
                // P(y = 1 | V) = E sigmoid(z), z ~ N(mean, sd^2), by
                // Gauss-Hermite quadrature
                let (nodes, weights) = &self.gh;
                let mut p1 = 0.0;
                for (x, wq) in nodes.iter().zip(weights.iter()) {
                    p1 += wq * sigmoid(mean + std::f64::consts::SQRT_2 * sd * x);
                }
                p1 /= std::f64::consts::PI.sqrt();
                let p1 = p1.clamp(1e-300, 1.0 - 1e-16);
                log_phi + if u > 0.5 { p1.ln() } else { (1.0 - p1).ln() }
            }
        }
    }
}

/// Log-likelihood of a single adjusted row under a candidate configuration's
/// solved parameters.
pub fn config_loglik(
    v_row: &ArrayView1<f64>,
    u: f64,
    psi_i: usize,
    params: &SeParams,
    problem: &SeProblem,
    noise_var: f64,
) -> Result<f64> {
    let cl = ConfigLikelihood::new(params, problem, noise_var)?;
    Ok(cl.loglik(v_row, u, psi_i))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorEntry {
    pub eta: Vec<usize>,
    pub log_likelihood: f64,
    pub prior_prob: f64,
    pub posterior_prob: f64,
}

/// Normalized posterior over an enumerated support of configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub entries: Vec<PosteriorEntry>,
    pub log_normalizer: f64,
}

impl PosteriorTable {
    pub fn mode(&self) -> &PosteriorEntry {
        self.entries
            .iter()
            .max_by(|a, b| a.posterior_prob.total_cmp(&b.posterior_prob))
            .expect("posterior support is nonempty")
    }

    /// Marginal distribution over change point locations: the posterior
    /// mass of every configuration containing each location, renormalized
    /// to sum to one over locations.
    pub fn marginal_locations(&self) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for e in &self.entries {
            for &loc in &e.eta {
                *acc.entry(loc).or_insert(0.0) += e.posterior_prob;
            }
        }
        let total: f64 = acc.values().sum();
        if total <= 0.0 {
            return acc.into_iter().collect();
        }
        acc.into_iter().map(|(k, v)| (k, v / total)).collect()
    }

    /// CSV rows (location, probability) of the marginal location posterior.
    pub fn write_marginal_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "location,probability")?;
        for (loc, p) in self.marginal_locations() {
            writeln!(out, "{loc},{p:.16e}")?;
        }
        Ok(())
    }
}

fn cache_key(cp: &ChangePoints) -> Vec<i64> {
    cp.fractions()
        .iter()
        .map(|&f| (f * 100.0).round() as i64)
        .collect()
}

/// Posterior over the supplied support, evaluated on arbitrary rows (v, u).
/// The plug-in posterior passes the adjusted estimates; the theory-side
/// check passes sampled rows instead. Fixed-point solutions are cached per
/// rounded segment-fraction signature (two decimals), since the solved
/// parameters depend on a configuration only through its limit fractions.
pub fn posterior_from_rows(
    v: &ArrayView2<f64>,
    u: &ArrayView1<f64>,
    prior: &ChangePointPrior,
    base: &SeProblem,
    support: &[ChangePoints],
    noise_var: f64,
) -> Result<PosteriorTable> {
    if support.is_empty() {
        return Err(Error::Config("posterior support is empty".into()));
    }
    let n = v.nrows();

    // one fixed-point solve per distinct rounded-fraction signature
    let mut keys: Vec<Vec<i64>> = Vec::with_capacity(support.len());
    let mut unique: BTreeMap<Vec<i64>, SeProblem> = BTreeMap::new();
    for cp in support {
        if cp.n() != n {
            return Err(Error::Validation(format!(
                "support configuration built for n = {}, rows have n = {n}",
                cp.n()
            )));
        }
        let key = cache_key(cp);
        keys.push(key.clone());
        unique.entry(key.clone()).or_insert_with(|| {
            let mut problem = base.clone();
            problem.boundaries = key.iter().map(|&k| k as f64 / 100.0).collect();
            // rounding may collapse a short segment; fall back to the exact
            // fractions when it does
            if problem.boundaries.windows(2).any(|w| w[1] <= w[0]) {
                problem.boundaries = cp.fractions();
            }
            problem.labels = (1..=cp.segments()).collect();
            problem
        });
    }
    let solved: BTreeMap<Vec<i64>, ConfigLikelihood> = unique
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(key, problem)| {
            let params = solve_se(&problem)?;
            let cl = ConfigLikelihood::new(&params, &problem, noise_var)?;
            Ok((key, cl))
        })
        .collect::<Result<_>>()?;

    let logliks: Vec<f64> = support
        .par_iter()
        .zip(keys.par_iter())
        .map(|(cp, key)| {
            let cl = &solved[key];
            let cfg = SignalConfig::from_changepoints(cp);
            let mut acc = 0.0;
            for i in 0..n {
                acc += cl.loglik(&v.row(i), u[i], cfg.label(i + 1));
            }
            acc
        })
        .collect();

    let log_prior: Vec<f64> = support.iter().map(|cp| prior.log_prior(cp)).collect();
    let log_post: Vec<f64> = logliks
        .iter()
        .zip(log_prior.iter())
        .map(|(ll, lp)| ll + lp)
        .collect();
    let normalizer = log_sum_exp(&log_post);
    if !normalizer.is_finite() {
        return Err(Error::Numeric(
            "every configuration in the support has zero posterior mass".into(),
        ));
    }
    let entries = support
        .iter()
        .zip(logliks.iter())
        .zip(log_prior.iter())
        .zip(log_post.iter())
        .map(|(((cp, &ll), &lp), &joint)| PosteriorEntry {
            eta: cp.positions().to_vec(),
            log_likelihood: ll,
            prior_prob: lp.exp(),
            posterior_prob: (joint - normalizer).exp(),
        })
        .collect();
    Ok(PosteriorTable {
        entries,
        log_normalizer: normalizer,
    })
}

/// Candidate configurations for the posterior: the prior's support, with
/// candidate locations optionally downsampled to `grid_points` evenly
/// spaced values per coordinate. Full enumeration of multi-change supports
/// is allowed below n = 2000; larger problems must pass a grid.
pub fn enumerate_support(
    prior: &ChangePointPrior,
    n: usize,
    grid_points: Option<usize>,
) -> Result<Vec<ChangePoints>> {
    // change point counts the prior supports, plus its location spacing
    let (counts, gap): (Vec<usize>, usize) = match prior {
        ChangePointPrior::ExactUniform { segments } => (vec![segments - 1], 1),
        ChangePointPrior::AtMostUniform { max_segments } => ((0..*max_segments).collect(), 1),
        ChangePointPrior::SpacedUniform { segments, min_gap } => {
            (vec![segments - 1], (*min_gap).max(1))
        }
        ChangePointPrior::Alternating => (vec![2], 1),
        ChangePointPrior::Custom { table } => {
            return table
                .iter()
                .map(|e| ChangePoints::new(e.eta.clone(), n))
                .collect();
        }
    };
    let lo = (gap + 1).max(2);
    let hi = n.saturating_sub(gap.max(1));
    if hi < lo {
        return Err(Error::Config(format!(
            "no admissible change point locations in [{lo}, {hi}]"
        )));
    }
    let all: Vec<usize> = (lo..=hi).collect();
    let locations: Vec<usize> = match grid_points {
        Some(g) => {
            if g < 1 {
                return Err(Error::Config("grid_points must be positive".into()));
            }
            let g = g.min(all.len());
            (0..g)
                .map(|j| {
                    let pos = if g == 1 {
                        0.0
                    } else {
                        j as f64 / (g - 1) as f64 * (all.len() - 1) as f64
                    };
                    all[pos.round() as usize]
                })
                .collect()
        }
        None => {
            if counts.iter().any(|&k| k >= 2) && n >= 2000 {
                return Err(Error::Config(
                    "full enumeration of multi-change supports is limited to n < 2000; pass \
                     grid_points"
                        .into(),
                ));
            }
            all
        }
    };

    let mut support = Vec::new();
    for &k in &counts {
        if k == 0 {
            support.push(ChangePoints::none(n));
            continue;
        }
        // k-subsets with pairwise spacing >= gap
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(cur) = stack.pop() {
            if cur.len() == k {
                support.push(ChangePoints::new(cur, n)?);
                continue;
            }
            let min_next = cur.last().map(|&e| e + gap).unwrap_or(0);
            for &loc in locations.iter().filter(|&&loc| loc >= min_next.max(lo)) {
                if cur.last().map(|&e| loc > e).unwrap_or(true) {
                    let mut next = cur.clone();
                    next.push(loc);
                    stack.push(next);
                }
            }
            if support.len() + stack.len() > 200_000 {
                return Err(Error::Config(
                    "posterior support exceeds 200000 configurations; pass a smaller grid".into(),
                ));
            }
        }
    }
    Ok(support)
}

/// Plug-in posterior: the adjusted estimates and observed responses stand in
/// for the limiting Gaussian pair.
pub fn posterior(
    adjusted: &AdjustedEstimates,
    data: &Dataset,
    prior: &ChangePointPrior,
    base: &SeProblem,
    support: &[ChangePoints],
    noise_var: f64,
) -> Result<PosteriorTable> {
    posterior_from_rows(
        &adjusted.theta_adj.view(),
        &data.y.view(),
        prior,
        base,
        support,
        noise_var,
    )
}

/// Result of the data-driven signal strength estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: Array2<f64>,
    /// Frobenius residual of the second-moment equation at the solution.
    pub residual: f64,
    pub warning: Option<String>,
    pub params: SeParams,
}

/// Estimate Gamma by requiring the solved fixed point to reproduce the
/// empirical second moment of the adjusted estimates,
/// (1/n) theta_adj' theta_adj = Lambda' Gamma Lambda + K, with the
/// configuration set to psi_hat: outer damped update of Gamma around the
/// inner fixed-point solve, result projected to be SPD.
pub fn estimate_gamma(
    adjusted: &AdjustedEstimates,
    data: &Dataset,
    base: &SeProblem,
    psi_hat: &SignalConfig,
) -> Result<GammaEstimate> {
    let n = data.n();
    if psi_hat.n() != n {
        return Err(Error::Validation(
            "configuration and data disagree on the sample count".into(),
        ));
    }
    let cp = psi_hat.changepoints();
    let fracs = cp.fractions();
    for w in fracs.windows(2) {
        if w[1] - w[0] < 1e-3 {
            return Err(Error::Validation(format!(
                "segment fraction {:.5} is too small to identify its signal",
                w[1] - w[0]
            )));
        }
    }
    let l = base.signals();
    if psi_hat.segments() > l {
        return Err(Error::Validation(format!(
            "configuration has {} segments but the problem carries {l} signals",
            psi_hat.segments()
        )));
    }

    // empirical second moment
    let s = adjusted.theta_adj.t().dot(&adjusted.theta_adj) / n as f64;

    let mut problem = base.clone();
    problem.boundaries = fracs;
    problem.labels = (1..=psi_hat.segments()).collect();

    let mut gamma = spd_clip(&s.view(), 1e-8);
    let mut params = None;
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        problem.gamma = gamma.clone();
        let solved = solve_se(&problem)?;
        let fitted = solved.lambda.t().dot(&problem.gamma).dot(&solved.lambda) + &solved.kappa;
        residual = (&s - &fitted).iter().map(|d| d * d).sum::<f64>().sqrt();
        // Gamma_new = Lambda^{-T} (S - K) Lambda^{-1}
        let m = &s - &solved.kappa;
        let lam_t = solved.lambda.t().to_owned();
        let mut w = Array2::<f64>::zeros((l, l));
        for col in 0..l {
            let rhs = m.column(col).to_owned();
            let sol = solve_general(&lam_t.view(), &rhs.view()).ok_or_else(|| {
                Error::Numeric("bias matrix is singular; cannot invert the moment equation".into())
            })?;
            w.column_mut(col).assign(&sol);
        }
        // Gamma Lambda = W  =>  Lambda' Gamma' = W'
        let mut gamma_new = Array2::<f64>::zeros((l, l));
        for row in 0..l {
            let rhs = w.row(row).to_owned();
            let sol = solve_general(&lam_t.view(), &rhs.view()).ok_or_else(|| {
                Error::Numeric("bias matrix is singular; cannot invert the moment equation".into())
            })?;
            gamma_new.row_mut(row).assign(&sol);
        }
        // symmetrize and keep SPD
        let gamma_sym = (&gamma_new + &gamma_new.t()) * 0.5;
        let gamma_next = spd_clip(&gamma_sym.view(), 1e-8);
        let change = (&gamma_next - &gamma).iter().map(|d| d * d).sum::<f64>().sqrt();
        let scale = gamma.iter().map(|d| d * d).sum::<f64>().sqrt().max(1.0);
        gamma = &gamma * 0.5 + &gamma_next * 0.5;
        params = Some(solved);
        if change <= 1e-6 * scale {
            break;
        }
    }
    let params = params.expect("at least one iteration ran");
    let warning = if residual > GAMMA_RESIDUAL_WARN {
        Some(format!(
            "second-moment residual {residual:.4} exceeds {GAMMA_RESIDUAL_WARN}; the estimate may \
             be unreliable"
        ))
    } else {
        None
    };
    Ok(GammaEstimate {
        gamma,
        residual,
        warning,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NoiseDist;
    use crate::solver::fit_weighted_erm;
    use crate::state_evolution::WeightScheme;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn linear_dataset(n: usize, p: usize, seed: u64, sd: f64) -> (Dataset, Array1<f64>) {
        let mut rng = crate::rng::stream_rng(seed, 2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((n, p), |_| normal.sample(&mut rng) / (n as f64).sqrt());
        let beta =
            Array1::from_shape_fn(p, |_| normal.sample(&mut rng) * (n as f64 / p as f64).sqrt());
        let y = Array1::from_shape_fn(n, |i| x.row(i).dot(&beta) + sd * normal.sample(&mut rng));
        (Dataset::new(x, y).unwrap(), beta)
    }

    #[test]
    fn b_hat_closed_form_for_unit_curvature() {
        // squared loss with unit weights: the map is 1/(1+b), root 1/(delta-1)
        let (data, _) = linear_dataset(100, 20, 1, 0.5);
        let w = WeightMatrix::constant(100);
        let fit = fit_weighted_erm(&data, Loss::Squared, &w, 0.0).unwrap();
        let adj = adjust(&fit, &data, Loss::Squared, &w).unwrap();
        let delta = 5.0;
        assert!((adj.b_hat[0] - 1.0 / (delta - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn b_hat_scales_with_constant_curvature() {
        // two constant half-weight columns: curvature c = 1/2 everywhere,
        // so b_hat = 1/(c (delta - 1)) = 2/(delta - 1)
        let (data, _) = linear_dataset(120, 20, 2, 0.5);
        let w = WeightMatrix::new(Array2::from_elem((120, 2), 0.5)).unwrap();
        let fit = fit_weighted_erm(&data, Loss::Squared, &w, 0.0).unwrap();
        let adj = adjust(&fit, &data, Loss::Squared, &w).unwrap();
        let delta = 6.0;
        for col in 0..2 {
            assert!((adj.b_hat[col] - 2.0 / (delta - 1.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn adjustment_is_the_stated_gradient_step() {
        let (data, _) = linear_dataset(90, 15, 3, 0.7);
        let w = WeightMatrix::constant(90);
        let fit = fit_weighted_erm(&data, Loss::huber_default(), &w, 0.0).unwrap();
        let adj = adjust(&fit, &data, Loss::huber_default(), &w).unwrap();
        for i in 0..90 {
            let theta = fit.theta_hat[(i, 0)];
            let expect = theta + adj.b_hat[0] * Loss::huber_default().du(theta, data.y[i]);
            assert!((adj.theta_adj[(i, 0)] - expect).abs() < 1e-12);
        }
        // residual of the empirical trace equation at b_hat
        let delta = 6.0;
        let value: f64 = (0..90)
            .map(|i| {
                1.0 / (1.0
                    + adj.b_hat[0] * Loss::huber_default().duu(fit.theta_hat[(i, 0)], data.y[i]))
            })
            .sum::<f64>()
            / 90.0;
        assert!((value - (1.0 - 1.0 / delta)).abs() < 1e-10);
    }

    #[test]
    fn logistic_b_hat_tracks_state_evolution() {
        // the empirical root and the theoretical b are asymptotically
        // equivalent; at n = 1000 a single draw still fluctuates ~10%, so
        // compare the average over seeds
        let n = 1000;
        let p = 200;
        let mut rels = Vec::new();
        for seed in [4u64, 14, 24] {
            let mut rng = crate::rng::stream_rng(seed, 3);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let x = Array2::from_shape_fn((n, p), |_| normal.sample(&mut rng) / (n as f64).sqrt());
            let beta = Array1::from_shape_fn(p, |_| {
                normal.sample(&mut rng) * (n as f64 / p as f64).sqrt()
            });
            let y = Array1::from_shape_fn(n, |i| {
                use rand::RngExt;
                let u: f64 = rng.random();
                f64::from(u <= sigmoid(x.row(i).dot(&beta)))
            });
            let data = Dataset::new(x, y).unwrap();
            let w = WeightMatrix::constant(n);
            let fit = fit_weighted_erm(&data, Loss::Logistic, &w, 0.0).unwrap();
            let adj = adjust(&fit, &data, Loss::Logistic, &w).unwrap();

            // the theory is parametrized by the realized signal strength
            let gamma_real = beta.iter().map(|b| b * b).sum::<f64>() / n as f64;
            let problem = SeProblem {
                delta: 5.0,
                gamma: array![[gamma_real]],
                loss: Loss::Logistic,
                model: GlmKind::Logistic,
                noise: NoiseDist::Uniform01,
                boundaries: vec![0.0, 1.0],
                labels: vec![1],
                weights: WeightScheme::Limit {
                    prior: ChangePointPrior::ExactUniform { segments: 1 },
                },
                n_eval: 64,
                mc_samples: 100_000,
                seed: 9,
            };
            let params = solve_se(&problem).unwrap();
            rels.push((adj.b_hat[0] - params.b[0]) / params.b[0]);
        }
        let mean_rel = rels.iter().sum::<f64>() / rels.len() as f64;
        assert!(
            mean_rel.abs() < 0.10,
            "mean relative gap {mean_rel:.3} across seeds ({rels:?})"
        );
    }

    fn base_problem(l: usize) -> SeProblem {
        SeProblem {
            delta: 4.0,
            gamma: Array2::eye(l),
            loss: Loss::Squared,
            model: GlmKind::Linear,
            noise: NoiseDist::Gaussian { sd: 1.0 },
            boundaries: if l == 1 {
                vec![0.0, 1.0]
            } else {
                vec![0.0, 0.5, 1.0]
            },
            labels: (1..=l.min(2)).collect(),
            weights: WeightScheme::Limit {
                prior: ChangePointPrior::ExactUniform { segments: l },
            },
            n_eval: 32,
            mc_samples: 5_000,
            seed: 1,
        }
    }

    #[test]
    fn flat_likelihood_recovers_prior() {
        // Lambda = 0, K = I, Gamma = I: the likelihood cannot distinguish
        // configurations, so the posterior equals the prior
        let base = base_problem(2);
        let params = SeParams {
            lambda: Array2::zeros((2, 2)),
            kappa: Array2::eye(2),
            b: vec![1.0, 1.0],
            residuals: Default::default(),
        };
        let cl = ConfigLikelihood::new(&params, &base, 1.0).unwrap();
        let v = array![0.3, -0.8];
        assert_eq!(cl.loglik(&v.view(), 0.4, 1), cl.loglik(&v.view(), 0.4, 2));
    }

    #[test]
    fn posterior_normalizes_and_respects_flat_likelihood() {
        // a symmetric problem plus configuration-independent rows: the
        // posterior must equal the (non-uniform) prior over the support
        let n = 60;
        let base = base_problem(2);
        let table_prior = ChangePointPrior::Custom {
            table: vec![
                crate::weights::CustomEntry {
                    eta: vec![21],
                    prob: 0.7,
                },
                crate::weights::CustomEntry {
                    eta: vec![41],
                    prob: 0.3,
                },
            ],
        };
        // all-zero rows and exactly mirrored configurations (fractions 1/3
        // and 2/3 of a symmetric weight profile): the two likelihoods agree
        // term for term, so the posterior must reproduce the prior masses
        let v = Array2::from_elem((n, 2), 0.0);
        let u = Array1::from_elem(n, 0.0);
        let support = vec![
            ChangePoints::new(vec![21], n).unwrap(),
            ChangePoints::new(vec![41], n).unwrap(),
        ];
        let table =
            posterior_from_rows(&v.view(), &u.view(), &table_prior, &base, &support, 1.0).unwrap();
        let total: f64 = table.entries.iter().map(|e| e.posterior_prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // symmetric likelihood (t -> 1-t mirror of the uniform profile)
        assert!((table.entries[0].posterior_prob - 0.7).abs() < 1e-6);
        assert!((table.entries[1].posterior_prob - 0.3).abs() < 1e-6);
    }

    #[test]
    fn posterior_is_invariant_to_loglik_shifts() {
        let lp = [-3.0, -1.0, -2.5];
        let shifted: Vec<f64> = lp.iter().map(|v| v + 123.456).collect();
        let n0 = log_sum_exp(&lp);
        let n1 = log_sum_exp(&shifted);
        for (a, b) in lp.iter().zip(shifted.iter()) {
            assert!(((a - n0).exp() - (b - n1).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_signal_posterior_is_uniform() {
        let n = 40;
        let base = base_problem(1);
        let prior = ChangePointPrior::ExactUniform { segments: 1 };
        let v = Array2::from_elem((n, 1), 0.2);
        let u = Array1::from_elem(n, 0.1);
        let support = vec![ChangePoints::none(n)];
        let table = posterior_from_rows(&v.view(), &u.view(), &prior, &base, &support, 1.0).unwrap();
        assert_eq!(table.entries.len(), 1);
        assert!((table.entries[0].posterior_prob - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_likelihood_masses_sum_to_density() {
        // exp(loglik(y=1)) + exp(loglik(y=0)) must equal the Gaussian
        // density of V alone
        let mut base = base_problem(2);
        base.model = GlmKind::Logistic;
        base.loss = Loss::Logistic;
        base.noise = NoiseDist::Uniform01;
        let params = SeParams {
            lambda: array![[0.7, 0.1], [0.2, 0.8]],
            kappa: array![[0.5, 0.1], [0.1, 0.4]],
            b: vec![1.0, 1.0],
            residuals: Default::default(),
        };
        let cl = ConfigLikelihood::new(&params, &base, 0.0).unwrap();
        let v = array![0.4, -1.2];
        for label in [1, 2] {
            let l1 = cl.loglik(&v.view(), 1.0, label).exp();
            let l0 = cl.loglik(&v.view(), 0.0, label).exp();
            let gl = base.gamma.dot(&params.lambda);
            let sigma_v = params.lambda.t().dot(&gl) + &params.kappa;
            let chol = cholesky(&sigma_v.view()).unwrap();
            let half = solve_lower(&chol.view(), &v.view());
            let quad: f64 = half.iter().map(|h| h * h).sum();
            let logdet = 2.0 * (0..2).map(|j| chol[(j, j)].ln()).sum::<f64>();
            let phi = (-0.5 * (quad + logdet + 2.0 * (2.0 * std::f64::consts::PI).ln())).exp();
            assert!(
                (l1 + l0 - phi).abs() < 1e-12 * phi,
                "label {label}: {l1} + {l0} vs {phi}"
            );
        }
    }

    #[test]
    fn support_enumeration_respects_prior_structure() {
        // at-most prior: null plus every single location
        let s = enumerate_support(&ChangePointPrior::AtMostUniform { max_segments: 2 }, 50, None)
            .unwrap();
        assert_eq!(s.len(), 1 + 48); // null + locations 2..=49
        assert!(s.iter().any(|cp| cp.positions().is_empty()));

        // spaced prior restricts the location range and pairwise distance
        let s = enumerate_support(
            &ChangePointPrior::SpacedUniform {
                segments: 3,
                min_gap: 10,
            },
            60,
            None,
        )
        .unwrap();
        for cp in &s {
            let e = cp.positions();
            assert_eq!(e.len(), 2);
            assert!(e[0] >= 11 && e[1] <= 50 && e[1] - e[0] >= 10);
        }

        // a 13-point grid caps the pair count at C(13, 2)
        let s = enumerate_support(
            &ChangePointPrior::ExactUniform { segments: 3 },
            4000,
            Some(13),
        )
        .unwrap();
        assert_eq!(s.len(), 13 * 12 / 2);

        // large-n enumeration without a grid is refused for pairs
        assert!(
            enumerate_support(&ChangePointPrior::ExactUniform { segments: 3 }, 4000, None)
                .is_err()
        );
    }

    #[test]
    fn degenerate_segment_is_rejected_by_gamma_estimation() {
        let n = 3000;
        let (data, _) = linear_dataset(n, 30, 6, 0.3);
        let w = ChangePointPrior::ExactUniform { segments: 2 }
            .marginal_weights(n)
            .unwrap();
        let fit = fit_weighted_erm(&data, Loss::Squared, &w, 0.0).unwrap();
        let adj = adjust(&fit, &data, Loss::Squared, &w).unwrap();
        let mut base = base_problem(2);
        base.delta = data.delta();
        base.weights = WeightScheme::Finite { matrix: w };
        // a change at sample 2 leaves a first segment of fraction 1/3000
        let psi = SignalConfig::from_changepoints(&ChangePoints::new(vec![2], n).unwrap());
        let err = estimate_gamma(&adj, &data, &base, &psi).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn adjusted_second_moment_matches_solved_parameters() {
        // (1/n) theta_adj' theta_adj concentrates at Lambda' Gamma Lambda + K
        let n = 2000;
        let p = 500;
        let mut rng = crate::rng::stream_rng(31, 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let delta = n as f64 / p as f64;
        let x = Array2::from_shape_fn((n, p), |_| normal.sample(&mut rng) / (n as f64).sqrt());
        let b_true =
            Array2::from_shape_fn((p, 2), |_| normal.sample(&mut rng) * delta.sqrt());
        let change = (0.4 * n as f64) as usize + 1;
        let y = Array1::from_shape_fn(n, |i| {
            let col = if i + 1 < change { 0 } else { 1 };
            x.row(i).dot(&b_true.column(col)) + normal.sample(&mut rng)
        });
        let data = Dataset::new(x, y).unwrap();
        let prior = ChangePointPrior::ExactUniform { segments: 2 };
        let w = prior.marginal_weights(n).unwrap();
        let fit = fit_weighted_erm(&data, Loss::Squared, &w, 0.0).unwrap();
        let adj = adjust(&fit, &data, Loss::Squared, &w).unwrap();

        let gamma = b_true.t().dot(&b_true) / n as f64;
        let problem = SeProblem {
            delta,
            gamma,
            loss: Loss::Squared,
            model: GlmKind::Linear,
            noise: NoiseDist::Gaussian { sd: 1.0 },
            boundaries: vec![0.0, (change - 1) as f64 / n as f64, 1.0],
            labels: vec![1, 2],
            weights: WeightScheme::Finite { matrix: w },
            n_eval: 256,
            mc_samples: 20_000,
            seed: 2,
        };
        let params = solve_se(&problem).unwrap();
        let s = adj.theta_adj.t().dot(&adj.theta_adj) / n as f64;
        let fitted = params.lambda.t().dot(&problem.gamma).dot(&params.lambda) + &params.kappa;
        for i in 0..2 {
            for j in 0..2 {
                let rel = (s[(i, j)] - fitted[(i, j)]).abs()
                    / (fitted[(i, i)] * fitted[(j, j)]).sqrt();
                assert!(
                    rel < 0.05,
                    "moment ({i},{j}): empirical {} vs fitted {} (rel {rel:.3})",
                    s[(i, j)],
                    fitted[(i, j)]
                );
            }
        }
    }

    #[test]
    fn gamma_estimate_recovers_homogeneous_signal_strength() {
        // L = 1 squared loss: gamma_hat = (1/n)||theta_adj||^2 - kappa with
        // kappa = sigma^2/(delta - 1)
        let n = 2000;
        let p = 400;
        let (data, beta) = linear_dataset(n, p, 7, 1.0);
        let w = WeightMatrix::constant(n);
        let fit = fit_weighted_erm(&data, Loss::Squared, &w, 0.0).unwrap();
        let adj = adjust(&fit, &data, Loss::Squared, &w).unwrap();
        let mut base = base_problem(1);
        base.delta = 5.0;
        base.weights = WeightScheme::Finite {
            matrix: WeightMatrix::constant(n),
        };
        let psi = SignalConfig::from_changepoints(&ChangePoints::none(n));
        let est = estimate_gamma(&adj, &data, &base, &psi).unwrap();
        // true gamma = ||beta||^2 / n under X ~ N(0, I/n) covariates
        let truth = beta.iter().map(|b| b * b).sum::<f64>() / n as f64;
        let rel = (est.gamma[(0, 0)] - truth).abs() / truth;
        assert!(rel < 0.10, "gamma {} vs truth {truth}", est.gamma[(0, 0)]);
        assert!(est.warning.is_none(), "unexpected warning: {:?}", est.warning);
    }
}
