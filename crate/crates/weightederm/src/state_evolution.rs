//! The low-dimensional fixed-point system characterizing the weighted fits
//! in the proportional regime, and the performance predictions built on it.
//!
//! For each signal column l, the triple (lambda_l, b_l, kappa_ll) solves
//!
//!   1 - 1/delta = avg_i E[ (1 + b sM_i'')^{-1} ]                    (trace)
//!   0           = avg_i E[ Z_i sM_i' ]                              (moment)
//!   kappa       = delta b^2 avg_i E[ (sM_i')^2 ]                    (variance)
//!
//! where sM_i' = pi_i M'(prox_{b pi_i M(., y_i)}(Z_i . lambda + w_i), y_i),
//! y_i = q(Z_i[psi_i], eps_i), Z_i ~ N(0, Gamma), w_i ~ N(0, kappa). Cross
//! covariances kappa_{l,l'} solve the analogous product equation with a
//! correlated pair (w_l, w_l').
//!
//! The average over i becomes an integral over t in [0,1] against the weight
//! profile, evaluated by a per-segment trapezoid rule. The solver iterates:
//! a monotone 1-D root-find for b given (lambda, kappa), an explicit
//! Stein-rearranged update for lambda, and a direct update for kappa, all
//! damped. For the squared loss in the linear model every expectation
//! reduces to deterministic quadrature (only the noise second moment
//! enters); other losses use Monte Carlo with common random numbers, with
//! draws allocated to grid nodes proportionally to their quadrature weight
//! and antithetic in w. At the solution the un-rearranged moment equation is
//! checked directly.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{hausdorff, ChangePoints, GlmKind, NoiseDist};
use crate::linalg::{cholesky, spd_clip, sym_eigen};
use crate::loss::{prox_unchecked, sigmoid, Loss};
use crate::rng::{stream_rng, substream, Purpose};
use crate::segmentation::{search, select_penalized, SearchConfig, SegmentationResult};
use crate::weights::{ChangePointPrior, WeightMatrix};
use crate::{Error, Result};

const B_BRACKET_LO: f64 = 1e-8;
const B_BRACKET_HI: f64 = 1e8;
const OUTER_TOL: f64 = 1e-4;
const MAX_OUTER_ITER: usize = 200;
const DAMPING: f64 = 0.5;

/// How the weight profile is supplied: the continuum limit of a prior, or a
/// finite-n weight matrix read at t = i/n.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    Limit { prior: ChangePointPrior },
    Finite { matrix: WeightMatrix },
}

fn default_n_eval() -> usize {
    512
}
fn default_mc_samples() -> usize {
    200_000
}

/// Inputs of the fixed-point system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeProblem {
    /// Sample ratio n/p, must exceed 1.
    pub delta: f64,
    /// Signal strength matrix (L x L, SPD): the limit of Cov(x' B).
    pub gamma: Array2<f64>,
    pub loss: Loss,
    pub model: GlmKind,
    pub noise: NoiseDist,
    /// Segment boundaries 0 = a_0 < .. < a_S = 1 as fractions of n.
    pub boundaries: Vec<f64>,
    /// Signal label of each segment (1-based; may repeat for alternating
    /// patterns, but adjacent labels must differ).
    pub labels: Vec<usize>,
    pub weights: WeightScheme,
    /// Quadrature grid size over t.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Monte Carlo draws per expectation (ignored by the squared/linear
    /// closed path).
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SeProblem {
    /// Problem for a concrete configuration: segment boundaries from the
    /// change point fractions, labels 1..=S.
    pub fn for_changepoints(
        cp: &ChangePoints,
        delta: f64,
        gamma: Array2<f64>,
        loss: Loss,
        model: GlmKind,
        noise: NoiseDist,
        weights: WeightScheme,
    ) -> Result<Self> {
        let boundaries = cp.fractions();
        let labels = (1..=cp.segments()).collect();
        let problem = SeProblem {
            delta,
            gamma,
            loss,
            model,
            noise,
            boundaries,
            labels,
            weights,
            n_eval: default_n_eval(),
            mc_samples: default_mc_samples(),
            seed: 0,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn signals(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 1.0) {
            return Err(Error::Config(format!(
                "delta must exceed 1, got {}",
                self.delta
            )));
        }
        let l = self.gamma.nrows();
        if self.gamma.ncols() != l || l == 0 {
            return Err(Error::Config("gamma must be square and nonempty".into()));
        }
        if cholesky(&self.gamma.view()).is_none() {
            return Err(Error::Config(
                "gamma must be symmetric positive definite".into(),
            ));
        }
        if self.boundaries.len() != self.labels.len() + 1 {
            return Err(Error::Config(
                "boundaries must have one more entry than labels".into(),
            ));
        }
        if self.boundaries.first() != Some(&0.0) || self.boundaries.last() != Some(&1.0) {
            return Err(Error::Config(
                "boundaries must start at 0 and end at 1".into(),
            ));
        }
        for w in self.boundaries.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(
                    "boundaries must be strictly increasing".into(),
                ));
            }
        }
        for (s, &lab) in self.labels.iter().enumerate() {
            if lab < 1 || lab > l {
                return Err(Error::Config(format!("segment label {lab} outside 1..={l}")));
            }
            if s > 0 && self.labels[s - 1] == lab {
                return Err(Error::Config(
                    "adjacent segments must carry different labels".into(),
                ));
            }
        }
        let scheme_l = match &self.weights {
            WeightScheme::Limit { prior } => prior.signals(),
            WeightScheme::Finite { matrix } => matrix.signals(),
        };
        if scheme_l != l {
            return Err(Error::Config(format!(
                "weight scheme has {scheme_l} columns, gamma is {l} x {l}"
            )));
        }
        if self.n_eval < 2 || self.mc_samples < 16 {
            return Err(Error::Config(
                "n_eval must be >= 2 and mc_samples >= 16".into(),
            ));
        }
        Ok(())
    }

    fn label_at(&self, t: f64) -> usize {
        let s = self
            .boundaries
            .windows(2)
            .position(|w| t < w[1])
            .unwrap_or(self.labels.len() - 1);
        self.labels[s]
    }

    /// True change points at sample size n: first index of each new segment.
    pub fn changepoints_at(&self, n: usize) -> Vec<usize> {
        self.boundaries[1..self.boundaries.len() - 1]
            .iter()
            .map(|&a| (a * n as f64).floor() as usize + 1)
            .collect()
    }
}

/// Solution of the fixed-point system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeParams {
    /// L x L bias matrix; column l is lambda^(l).
    pub lambda: Array2<f64>,
    /// L x L covariance matrix.
    pub kappa: Array2<f64>,
    /// Positive scalars b^(l).
    pub b: Vec<f64>,
    pub residuals: SeResiduals,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeResiduals {
    /// |trace-equation residual| per column at the solution.
    pub b_eq: Vec<f64>,
    /// Max-norm of the last (lambda, kappa) fixed-point update per column.
    pub update: Vec<f64>,
    /// Max-norm of the un-rearranged moment equation avg E[Z sM'] per
    /// column, evaluated at the solution.
    pub moment_eq: Vec<f64>,
    /// Five Monte Carlo standard errors for the moment check (tiny for the
    /// deterministic path).
    pub moment_tol: Vec<f64>,
    /// |cross-covariance equation residual| for each off-diagonal pair.
    pub cross_eq: Vec<f64>,
}

impl SeParams {
    /// Kappa projected onto the PSD cone (Monte Carlo noise can leave tiny
    /// negative modes).
    pub fn kappa_psd(&self) -> Array2<f64> {
        spd_clip(&self.kappa.view(), 0.0)
    }

    /// Smallest eigenvalue of kappa; the solved matrix should satisfy
    /// min_eig >= -1e-3 * trace up to Monte Carlo error.
    pub fn kappa_min_eigenvalue(&self) -> f64 {
        let (evals, _) = sym_eigen(&self.kappa.view());
        evals.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// quadrature grid

struct GridNode {
    weight: f64,
    label: usize,
    phi: Vec<f64>,
}

struct Grid {
    nodes: Vec<GridNode>,
}

fn build_grid(problem: &SeProblem) -> Result<Grid> {
    let mut ts = Vec::new();
    let mut weights = Vec::new();
    let mut labels = Vec::new();
    for (s, w) in problem.boundaries.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let mass = b - a;
        let pts = ((problem.n_eval as f64 * mass).ceil() as usize).max(2);
        let h = mass / (pts - 1) as f64;
        for j in 0..pts {
            ts.push(a + h * j as f64);
            weights.push(if j == 0 || j == pts - 1 { 0.5 * h } else { h });
            labels.push(problem.labels[s]);
        }
    }
    let phis: Vec<Vec<f64>> = match &problem.weights {
        WeightScheme::Limit { prior } => prior.limit_profile(&ts)?,
        WeightScheme::Finite { matrix } => {
            let n = matrix.n();
            ts.iter()
                .map(|&t| {
                    let i = ((n as f64 * t).floor() as usize).min(n - 1) + 1;
                    (1..=matrix.signals()).map(|l| matrix.get(i, l)).collect()
                })
                .collect()
        }
    };
    let nodes = ts
        .iter()
        .zip(weights)
        .zip(labels)
        .zip(phis)
        .map(|(((_t, weight), label), phi)| GridNode { weight, label, phi })
        .collect();
    Ok(Grid { nodes })
}

// ---------------------------------------------------------------------------
// deterministic path: squared loss + linear model
//
// prox = (u + b pi y)/(1 + b pi) gives sM' = pi (u - y)/(1 + b pi) and
// sM'' = pi, so each expectation is a polynomial in the second moments of
// (Z, w, eps) and reduces to quadrature over t.

struct SquaredPath<'a> {
    grid: &'a Grid,
    problem: &'a SeProblem,
    noise2: f64,
}

impl<'a> SquaredPath<'a> {
    fn new(grid: &'a Grid, problem: &'a SeProblem) -> Result<Self> {
        let noise2 = problem.noise.second_moment().ok_or_else(|| {
            Error::Config(
                "noise distribution lacks a finite second moment; the squared-loss theory needs \
                 one"
                    .into(),
            )
        })?;
        Ok(SquaredPath {
            grid,
            problem,
            noise2,
        })
    }

    fn trace_value(&self, ell: usize, b: f64) -> f64 {
        self.grid
            .nodes
            .iter()
            .map(|n| n.weight / (1.0 + b * n.phi[ell - 1]))
            .sum()
    }

    /// Quadratic form (lambda_a - e_psi)' Gamma (lambda_b - e_psi).
    fn gap_form(&self, lambda_a: &Array1<f64>, lambda_b: &Array1<f64>, label: usize) -> f64 {
        let l = lambda_a.len();
        let mut acc = 0.0;
        for i in 0..l {
            let da = lambda_a[i] - if i + 1 == label { 1.0 } else { 0.0 };
            for j in 0..l {
                let db = lambda_b[j] - if j + 1 == label { 1.0 } else { 0.0 };
                acc += da * self.problem.gamma[(i, j)] * db;
            }
        }
        acc
    }

    fn lambda_update(&self, ell: usize, b: f64) -> Array1<f64> {
        let l = self.problem.signals();
        let mut num = Array1::<f64>::zeros(l);
        for n in &self.grid.nodes {
            let pi = n.phi[ell - 1];
            num[n.label - 1] += n.weight * pi / (1.0 + b * pi);
        }
        num * (self.problem.delta * b)
    }

    fn kappa_solve(&self, ell: usize, b: f64, lambda: &Array1<f64>) -> f64 {
        let delta = self.problem.delta;
        let mut c2 = 0.0;
        let mut rhs = 0.0;
        for n in &self.grid.nodes {
            let pi = n.phi[ell - 1];
            let c = pi / (1.0 + b * pi);
            c2 += n.weight * c * c;
            rhs += n.weight * c * c * (self.gap_form(lambda, lambda, n.label) + self.noise2);
        }
        let scale = delta * b * b;
        scale * rhs / (1.0 - scale * c2)
    }

    /// Un-rearranged moment equation avg E[Z sM'] (exact here).
    fn moment_residual(&self, ell: usize, b: f64, lambda: &Array1<f64>) -> f64 {
        let l = self.problem.signals();
        let mut acc = Array1::<f64>::zeros(l);
        for n in &self.grid.nodes {
            let pi = n.phi[ell - 1];
            let c = pi / (1.0 + b * pi);
            for i in 0..l {
                let mut dot = 0.0;
                for j in 0..l {
                    let gap = lambda[j] - if j + 1 == n.label { 1.0 } else { 0.0 };
                    dot += self.problem.gamma[(i, j)] * gap;
                }
                acc[i] += n.weight * c * dot;
            }
        }
        acc.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    fn cross_solve(
        &self,
        ell: usize,
        ellp: usize,
        b_l: f64,
        b_lp: f64,
        lambda_l: &Array1<f64>,
        lambda_lp: &Array1<f64>,
    ) -> f64 {
        let delta = self.problem.delta;
        let mut c2 = 0.0;
        let mut rhs = 0.0;
        for n in &self.grid.nodes {
            let ca = n.phi[ell - 1] / (1.0 + b_l * n.phi[ell - 1]);
            let cb = n.phi[ellp - 1] / (1.0 + b_lp * n.phi[ellp - 1]);
            c2 += n.weight * ca * cb;
            rhs += n.weight * ca * cb * (self.gap_form(lambda_l, lambda_lp, n.label) + self.noise2);
        }
        let scale = delta * b_l * b_lp;
        scale * rhs / (1.0 - scale * c2)
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo path

/// Draws paired with grid nodes, allocated proportionally to the quadrature
/// weights. `pw` is the per-draw weight, so sums over draws of pw * f(draw)
/// estimate the t-integral of the expectation. u-draws come in antithetic
/// pairs.
struct McPool {
    /// signal-space gaussians, count x L row-major
    z: Vec<f64>,
    /// standard normals for the column's own w
    u1: Vec<f64>,
    /// independent standard normals for the second member of a cross pair
    u2: Vec<f64>,
    /// responses q(Z[psi], eps)
    y: Vec<f64>,
    /// sigmoid'(Z[psi]) per draw (logistic model only, else 0)
    link_slope: Vec<f64>,
    node_label: Vec<usize>,
    pw: Vec<f64>,
    /// per-draw pi for each column: pi_col[l][m]
    pi_col: Vec<Vec<f64>>,
    count: usize,
    signals: usize,
}

fn build_pool(problem: &SeProblem, grid: &Grid, stream: u64) -> Result<McPool> {
    use rand_distr::{Distribution, StandardNormal};
    let l = problem.signals();
    let chol =
        cholesky(&problem.gamma.view()).ok_or_else(|| Error::Config("gamma must be SPD".into()))?;
    let mut rng = stream_rng(problem.seed, stream);
    let mc = problem.mc_samples;

    let counts: Vec<usize> = grid
        .nodes
        .iter()
        .map(|n| (((mc as f64 * n.weight) / 2.0).round() as usize).max(1) * 2)
        .collect();
    let count: usize = counts.iter().sum();

    let mut pool = McPool {
        z: Vec::with_capacity(count * l),
        u1: Vec::with_capacity(count),
        u2: Vec::with_capacity(count),
        y: Vec::with_capacity(count),
        link_slope: Vec::with_capacity(count),
        node_label: Vec::with_capacity(count),
        pw: Vec::with_capacity(count),
        pi_col: vec![Vec::with_capacity(count); l],
        count,
        signals: l,
    };
    let normal = StandardNormal;
    let mut xi = vec![0.0f64; l];
    for (node, &cnt) in grid.nodes.iter().zip(counts.iter()) {
        let pw = node.weight / cnt as f64;
        for _pair in 0..(cnt / 2) {
            let u: f64 = normal.sample(&mut rng);
            let u2: f64 = normal.sample(&mut rng);
            for half in 0..2 {
                let sign = if half == 0 { 1.0 } else { -1.0 };
                for x in xi.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
                for i in 0..l {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += chol[(i, j)] * xi[j];
                    }
                    pool.z.push(acc);
                }
                let zpsi = pool.z[pool.z.len() - l + (node.label - 1)];
                let eps = problem.noise.sample(&mut rng);
                pool.y.push(problem.model.link(zpsi, eps));
                pool.link_slope.push(match problem.model {
                    GlmKind::Logistic => {
                        let s = sigmoid(zpsi);
                        s * (1.0 - s)
                    }
                    GlmKind::Linear => 0.0,
                });
                pool.u1.push(sign * u);
                pool.u2.push(sign * u2);
                pool.node_label.push(node.label);
                pool.pw.push(pw);
                for (lc, col) in pool.pi_col.iter_mut().enumerate() {
                    col.push(node.phi[lc]);
                }
            }
        }
    }
    // normalize so the per-draw weights sum exactly to one
    let total: f64 = pool.pw.iter().sum();
    for w in pool.pw.iter_mut() {
        *w /= total;
    }
    Ok(pool)
}

impl McPool {
    fn zdot(&self, lambda: &Array1<f64>) -> Vec<f64> {
        let l = self.signals;
        (0..self.count)
            .map(|m| {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += self.z[m * l + j] * lambda[j];
                }
                acc
            })
            .collect()
    }
}

struct McUpdates {
    kappa_rhs: f64,
    lambda_num: Array1<f64>,
    moment: Array1<f64>,
    moment_var: f64,
}

/// One full pass over the pool at fixed (b, kappa, lambda).
fn mc_updates(
    pool: &McPool,
    problem: &SeProblem,
    ell: usize,
    b: f64,
    kappa: f64,
    zdot: &[f64],
) -> McUpdates {
    let l = pool.signals;
    let sd = kappa.max(0.0).sqrt();
    let loss = problem.loss;
    let pi_col = &pool.pi_col[ell - 1];
    let mut kappa_rhs = 0.0;
    let mut lambda_num = Array1::<f64>::zeros(l);
    let mut moment = Array1::<f64>::zeros(l);
    let mut moment_sq = 0.0;
    for m in 0..pool.count {
        let pi = pi_col[m];
        let pw = pool.pw[m];
        let y = pool.y[m];
        let u = zdot[m] + sd * pool.u1[m];
        let rho = b * pi;
        let p = prox_unchecked(loss, rho, y, u);
        let duu = loss.duu(p, y);
        let du = loss.du(p, y);
        let smp = pi * du;
        kappa_rhs += pw * smp * smp;
        let lab = pool.node_label[m] - 1;
        match problem.model {
            GlmKind::Linear => {
                // the response moves one-for-one with z_psi, so the prox
                // sensitivity to the second loss argument carries the whole
                // z-gradient
                let c = -pi * loss.duv(p, y) / (1.0 + rho * duu);
                lambda_num[lab] += pw * c;
            }
            GlmKind::Logistic => {
                // condition the uniform latent out first: the smoothed
                // response mass sigmoid(z_psi) is differentiable in z, and
                // its slope weights the jump between the y = 1 and y = 0
                // branches of the prox residual
                let p1 = prox_unchecked(loss, rho, 1.0, u);
                let p0 = prox_unchecked(loss, rho, 0.0, u);
                let g1 = pi * (1.0 - sigmoid(p1));
                let g0 = pi * (0.0 - sigmoid(p0));
                lambda_num[lab] += pw * pool.link_slope[m] * (g1 - g0);
            }
        }
        let mut row_sq = 0.0;
        for j in 0..l {
            let zj = pool.z[m * l + j];
            moment[j] += pw * zj * smp;
            row_sq += zj * zj;
        }
        moment_sq += pw * pw * row_sq * smp * smp / l as f64;
    }
    McUpdates {
        kappa_rhs,
        lambda_num,
        moment,
        moment_var: moment_sq,
    }
}

fn mc_trace_only(pool: &McPool, loss: Loss, ell: usize, b: f64, kappa: f64, zdot: &[f64]) -> f64 {
    let sd = kappa.max(0.0).sqrt();
    let pi_col = &pool.pi_col[ell - 1];
    let mut trace = 0.0;
    for m in 0..pool.count {
        let pi = pi_col[m];
        let rho = b * pi;
        let u = zdot[m] + sd * pool.u1[m];
        let p = prox_unchecked(loss, rho, pool.y[m], u);
        trace += pool.pw[m] / (1.0 + rho * loss.duu(p, pool.y[m]));
    }
    trace
}

// ---------------------------------------------------------------------------
// solvers

/// Right-hand side of the trace equation at a candidate b: the weighted
/// average of E[(1 + b sM'')^{-1}], strictly decreasing in b on common
/// random numbers, so a bisection pins the root.
pub fn se_rhs_b(
    problem: &SeProblem,
    ell: usize,
    lambda: &Array1<f64>,
    kappa: f64,
    b: f64,
) -> Result<f64> {
    problem.validate()?;
    let grid = build_grid(problem)?;
    if matches!(problem.loss, Loss::Squared) && matches!(problem.model, GlmKind::Linear) {
        let path = SquaredPath::new(&grid, problem)?;
        return Ok(path.trace_value(ell, b));
    }
    let pool = build_pool(problem, &grid, ell as u64)?;
    let zdot = pool.zdot(lambda);
    Ok(mc_trace_only(&pool, problem.loss, ell, b, kappa, &zdot))
}

fn bisect_b(target: f64, mut eval: impl FnMut(f64) -> f64, warm: Option<f64>) -> Result<(f64, f64)> {
    // the trace value decreases in b
    let (mut lo, mut hi) = match warm {
        Some(w) => {
            let (lo, hi) = ((w / 8.0).max(B_BRACKET_LO), (w * 8.0).min(B_BRACKET_HI));
            if eval(lo) >= target && eval(hi) <= target {
                (lo, hi)
            } else {
                (B_BRACKET_LO, B_BRACKET_HI)
            }
        }
        None => (B_BRACKET_LO, B_BRACKET_HI),
    };
    if lo == B_BRACKET_LO && hi == B_BRACKET_HI {
        if eval(hi) > target {
            return Err(Error::EstimatorNonexistent(format!(
                "trace equation has no root below b = {B_BRACKET_HI}: the weighted fit is likely \
                 unbounded (value at bracket end {:.6} > target {:.6})",
                eval(hi),
                target
            )));
        }
        if eval(lo) < target {
            return Err(Error::Numeric(format!(
                "trace equation already below target at b = {B_BRACKET_LO}"
            )));
        }
    }
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if eval(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    let b = (lo * hi).sqrt();
    Ok((b, eval(b)))
}

/// Solution of one diagonal triple (lambda^(l), b^(l), kappa_{l,l}).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagonalTriple {
    pub lambda: Array1<f64>,
    pub b: f64,
    pub kappa: f64,
    pub residual_b: f64,
    pub residual_update: f64,
    pub moment_residual: f64,
    pub moment_tol: f64,
}

/// Solve the self-contained system for column `ell` by damped fixed-point
/// iteration with an inner monotone root-find for b.
pub fn solve_diagonal_triple(problem: &SeProblem, ell: usize) -> Result<DiagonalTriple> {
    problem.validate()?;
    let l = problem.signals();
    if ell < 1 || ell > l {
        return Err(Error::Config(format!("column {ell} outside 1..={l}")));
    }
    let grid = build_grid(problem)?;
    let target = 1.0 - 1.0 / problem.delta;
    let delta = problem.delta;

    // neutral start: the b -> 0 limit of the lambda update is the
    // phi-weighted segment indicator average
    let mut lambda = {
        let mut num = Array1::<f64>::zeros(l);
        let mut den = 0.0;
        for n in &grid.nodes {
            num[n.label - 1] += n.weight * n.phi[ell - 1];
            den += n.weight * n.phi[ell - 1];
        }
        num / den.max(1e-300)
    };
    let gdiag = (0..l).map(|j| problem.gamma[(j, j)]).sum::<f64>() / l as f64;
    let mut kappa = 0.1 * (gdiag + problem.noise.second_moment().unwrap_or(1.0));

    let squared_linear =
        matches!(problem.loss, Loss::Squared) && matches!(problem.model, GlmKind::Linear);

    if squared_linear {
        let path = SquaredPath::new(&grid, problem)?;
        let (b, traced) = bisect_b(target, |b| path.trace_value(ell, b), None)?;
        // lambda has a closed form given b (one assignment lands the fixed
        // point) and kappa then solves a linear equation
        let lambda_new = path.lambda_update(ell, b);
        let kappa_new = path.kappa_solve(ell, b, &lambda_new);
        let update = lambda_new
            .iter()
            .zip(lambda.iter())
            .map(|(a, o)| (a - o).abs())
            .fold(0.0, f64::max);
        let _ = update;
        lambda = lambda_new;
        kappa = kappa_new;
        // confirm the assignments are a fixed point
        let re_lambda = path.lambda_update(ell, b);
        let re_kappa = path.kappa_solve(ell, b, &lambda);
        let residual_update = re_lambda
            .iter()
            .zip(lambda.iter())
            .map(|(a, o)| (a - o).abs())
            .fold((re_kappa - kappa).abs(), f64::max);
        let moment = path.moment_residual(ell, b, &lambda);
        return Ok(DiagonalTriple {
            lambda,
            b,
            kappa,
            residual_b: (traced - target).abs(),
            residual_update,
            moment_residual: moment,
            moment_tol: 1e-6,
        });
    }

    let pool = build_pool(problem, &grid, ell as u64)?;
    let mut b = 1.0 / (delta - 1.0);
    let mut history = Vec::new();
    let mut last_step = f64::INFINITY;
    for iter in 0..MAX_OUTER_ITER {
        let zdot = pool.zdot(&lambda);
        let warm = if iter == 0 { None } else { Some(b) };
        let (b_new, traced) = bisect_b(
            target,
            |cand| mc_trace_only(&pool, problem.loss, ell, cand, kappa, &zdot),
            warm,
        )?;
        b = b_new;
        let upd = mc_updates(&pool, problem, ell, b, kappa, &zdot);
        let lambda_new = upd.lambda_num.mapv(|v| v * delta * b);
        let kappa_new = (delta * b * b * upd.kappa_rhs).max(1e-12);
        let step = lambda_new
            .iter()
            .zip(lambda.iter())
            .map(|(a, o)| (a - o).abs())
            .fold((kappa_new - kappa).abs(), f64::max);
        lambda = &lambda * (1.0 - DAMPING) + &lambda_new.mapv(|v| v * DAMPING);
        kappa = kappa * (1.0 - DAMPING) + kappa_new * DAMPING;
        history.push(step);
        last_step = step;
        if step <= OUTER_TOL {
            let zdot = pool.zdot(&lambda);
            let upd = mc_updates(&pool, problem, ell, b, kappa, &zdot);
            let moment = upd.moment.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let stderr = upd.moment_var.max(0.0).sqrt();
            return Ok(DiagonalTriple {
                lambda,
                b,
                kappa,
                residual_b: (traced - target).abs(),
                residual_update: step,
                moment_residual: moment,
                moment_tol: 5.0 * stderr,
            });
        }
    }
    Err(Error::SeNonConvergence {
        message: format!(
            "column {ell} did not reach update tolerance {OUTER_TOL} in {MAX_OUTER_ITER} \
             iterations (last update {last_step:.3e})"
        ),
        residual_history: history,
    })
}

/// Cross covariance kappa_{l,l'} given both diagonal triples: damped scalar
/// fixed point of the product-moment map with a correlated (w_l, w_l') pair.
/// Returns (kappa_{l,l'}, residual).
pub fn solve_cross_cov(
    problem: &SeProblem,
    ell: usize,
    ellp: usize,
    triples: &[DiagonalTriple],
) -> Result<(f64, f64)> {
    problem.validate()?;
    let grid = build_grid(problem)?;
    let ta = &triples[ell - 1];
    let tb = &triples[ellp - 1];
    if ell == ellp {
        return Ok((ta.kappa, 0.0));
    }
    if matches!(problem.loss, Loss::Squared) && matches!(problem.model, GlmKind::Linear) {
        let path = SquaredPath::new(&grid, problem)?;
        let k = path.cross_solve(ell, ellp, ta.b, tb.b, &ta.lambda, &tb.lambda);
        return Ok((k, 0.0));
    }

    let stream = 1000 + (ell * problem.signals() + ellp) as u64;
    let pool = build_pool(problem, &grid, stream)?;
    let zdot_a = pool.zdot(&ta.lambda);
    let zdot_b = pool.zdot(&tb.lambda);
    let loss = problem.loss;
    let (pia, pib) = (&pool.pi_col[ell - 1], &pool.pi_col[ellp - 1]);
    let bound = (ta.kappa * tb.kappa).sqrt();
    let sd_a = ta.kappa.max(0.0).sqrt();

    let mut kc = 0.0f64;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_OUTER_ITER {
        // w_b = (kc / sd_a) u1 + sqrt(kappa_b - (kc/sd_a)^2) u2
        let slope = if sd_a > 0.0 { kc / sd_a } else { 0.0 };
        let ortho = (tb.kappa - slope * slope).max(0.0).sqrt();
        let mut acc = 0.0;
        for m in 0..pool.count {
            let ua = pool.u1[m];
            let wa = sd_a * ua;
            let wb = slope * ua + ortho * pool.u2[m];
            let y = pool.y[m];
            let pa = prox_unchecked(loss, ta.b * pia[m], y, zdot_a[m] + wa);
            let pb = prox_unchecked(loss, tb.b * pib[m], y, zdot_b[m] + wb);
            acc += pool.pw[m] * (pia[m] * loss.du(pa, y)) * (pib[m] * loss.du(pb, y));
        }
        let mapped = problem.delta * ta.b * tb.b * acc;
        residual = (mapped - kc).abs();
        kc = (kc + DAMPING * (mapped - kc)).clamp(-0.999 * bound, 0.999 * bound);
        if residual <= OUTER_TOL {
            return Ok((kc, residual));
        }
    }
    Err(Error::SeNonConvergence {
        message: format!("cross covariance ({ell},{ellp}) residual stuck at {residual:.3e}"),
        residual_history: vec![residual],
    })
}

/// Solve the full system: L diagonal triples plus the off-diagonal cross
/// covariances.
pub fn solve_se(problem: &SeProblem) -> Result<SeParams> {
    problem.validate()?;
    let l = problem.signals();
    let triples: Vec<DiagonalTriple> = (1..=l)
        .into_par_iter()
        .map(|ell| solve_diagonal_triple(problem, ell))
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, usize)> = (1..=l)
        .flat_map(|a| ((a + 1)..=l).map(move |b| (a, b)))
        .collect();
    let crosses: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|&(a, b)| solve_cross_cov(problem, a, b, &triples))
        .collect::<Result<_>>()?;

    let mut lambda = Array2::<f64>::zeros((l, l));
    let mut kappa = Array2::<f64>::zeros((l, l));
    let mut residuals = SeResiduals::default();
    for (idx, t) in triples.iter().enumerate() {
        lambda.column_mut(idx).assign(&t.lambda);
        kappa[(idx, idx)] = t.kappa;
        residuals.b_eq.push(t.residual_b);
        residuals.update.push(t.residual_update);
        residuals.moment_eq.push(t.moment_residual);
        residuals.moment_tol.push(t.moment_tol);
    }
    for (&(a, b), &(val, res)) in pairs.iter().zip(crosses.iter()) {
        kappa[(a - 1, b - 1)] = val;
        kappa[(b - 1, a - 1)] = val;
        residuals.cross_eq.push(res);
    }
    Ok(SeParams {
        lambda,
        kappa,
        b: triples.iter().map(|t| t.b).collect(),
        residuals,
    })
}

// ---------------------------------------------------------------------------
// performance prediction

/// Estimator applied to a loss matrix (the theory side must run the same
/// procedure as the empirical side).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentationProcedure {
    /// Exactly `changes` change points.
    FixedOrder { cfg: SearchConfig, changes: usize },
    /// Penalized selection over 0..=max_signals-1 change points.
    Penalized { cfg: SearchConfig },
}

impl SegmentationProcedure {
    pub fn run(&self, lossmat: &Array2<f64>) -> Result<SegmentationResult> {
        match self {
            SegmentationProcedure::FixedOrder { cfg, changes } => search(lossmat, cfg, *changes),
            SegmentationProcedure::Penalized { cfg } => select_penalized(lossmat, cfg),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerformancePrediction {
    /// Mean scaled Hausdorff distance over trials where it is defined.
    pub mean_hausdorff_frac: Option<f64>,
    /// Mean number of estimated segments.
    pub mean_size: f64,
    pub hausdorff_fracs: Vec<Option<f64>>,
    pub sizes: Vec<usize>,
}

/// Sample the asymptotic law of the fitted predictors at sample size n, run
/// the given segmentation procedure on each draw, and average the scaled
/// Hausdorff error and the segment count.
pub fn predict_performance(
    problem: &SeProblem,
    params: &SeParams,
    procedure: &SegmentationProcedure,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<PerformancePrediction> {
    problem.validate()?;
    let l = problem.signals();
    let chol_gamma =
        cholesky(&problem.gamma.view()).ok_or_else(|| Error::Config("gamma must be SPD".into()))?;
    let mut kridge = params.kappa_psd();
    for j in 0..l {
        kridge[(j, j)] += 1e-12 * (1.0 + kridge[(j, j)]);
    }
    let chol_kappa = cholesky(&kridge.view())
        .ok_or_else(|| Error::Numeric("kappa could not be factored after PSD projection".into()))?;

    // per-row labels and weight profiles
    let ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let labels: Vec<usize> = ts.iter().map(|&t| problem.label_at(t)).collect();
    let phis: Vec<Vec<f64>> = match &problem.weights {
        WeightScheme::Limit { prior } => prior.limit_profile(&ts)?,
        WeightScheme::Finite { matrix } => {
            let nw = matrix.n();
            ts.iter()
                .map(|&t| {
                    let i = ((nw as f64 * t).floor() as usize).min(nw - 1) + 1;
                    (1..=l).map(|c| matrix.get(i, c)).collect()
                })
                .collect()
        }
    };
    let eta_true = problem.changepoints_at(n);

    let results: Vec<(Option<f64>, usize)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = substream(seed, trial as u64, Purpose::Prediction);
            let normal = StandardNormal;
            let mut lossmat = Array2::<f64>::zeros((n, l));
            let mut xi = vec![0.0f64; l];
            let mut z = vec![0.0f64; l];
            let mut g = vec![0.0f64; l];
            for i in 0..n {
                for x in xi.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
                for r in 0..l {
                    let mut acc = 0.0;
                    for c in 0..=r {
                        acc += chol_gamma[(r, c)] * xi[c];
                    }
                    z[r] = acc;
                }
                for x in xi.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
                for r in 0..l {
                    let mut acc = 0.0;
                    for c in 0..=r {
                        acc += chol_kappa[(r, c)] * xi[c];
                    }
                    g[r] = acc;
                }
                let eps = problem.noise.sample(&mut rng);
                let y = problem.model.link(z[labels[i] - 1], eps);
                for col in 0..l {
                    let mut v = g[col];
                    for j in 0..l {
                        v += z[j] * params.lambda[(j, col)];
                    }
                    let rho = params.b[col] * phis[i][col];
                    let theta = prox_unchecked(problem.loss, rho, y, v);
                    lossmat[(i, col)] = problem.loss.value(theta, y);
                }
            }
            let seg = procedure.run(&lossmat)?;
            let frac = hausdorff(seg.eta_hat.positions(), &eta_true).map(|d| d / n as f64);
            Ok((frac, seg.eta_hat.segments()))
        })
        .collect::<Result<_>>()?;

    let fracs: Vec<Option<f64>> = results.iter().map(|r| r.0).collect();
    let sizes: Vec<usize> = results.iter().map(|r| r.1).collect();
    let defined: Vec<f64> = fracs.iter().flatten().cloned().collect();
    Ok(PerformancePrediction {
        mean_hausdorff_frac: if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        },
        mean_size: sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
        hausdorff_fracs: fracs,
        sizes,
    })
}
