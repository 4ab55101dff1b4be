//! Change point search over the fitted loss matrix and cross-validated
//! selection of the number of change points.
//!
//! A configuration with exactly k change points uses labels 1..=k+1, and its
//! cost is the sum of lossmat[i, psi_i] plus a penalty. The exhaustive search
//! is a dynamic program over (segment, position); because the objective is
//! separable over samples given the configuration, the DP minimum equals the
//! minimum over all valid configurations.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChangePoints, Dataset, GlmKind, SignalConfig};
use crate::linalg::ln_binomial;
use crate::loss::Loss;
use crate::solver::{fit_weighted_erm, loss_matrix};
use crate::weights::ChangePointPrior;
use crate::{Error, Result};

/// Penalty on a configuration, as a function of its change point count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    None,
    /// c * (number of change points)
    PerChangePoint { c: f64 },
    /// log C(n-1, k), the log count of k-change-point placements
    LogBinomial,
}

impl Penalty {
    pub fn value(&self, changes: usize, n: usize) -> f64 {
        match *self {
            Penalty::None => 0.0,
            Penalty::PerChangePoint { c } => c * changes as f64,
            Penalty::LogBinomial => ln_binomial(n - 1, changes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Upper bound L on the number of signals (so up to L-1 change points).
    pub max_signals: usize,
    pub penalty: Penalty,
    /// Minimum segment length.
    pub min_gap: usize,
    pub strategy: SearchStrategy,
}

impl SearchConfig {
    pub fn new(max_signals: usize) -> Self {
        SearchConfig {
            max_signals,
            penalty: Penalty::None,
            min_gap: 1,
            strategy: SearchStrategy::Greedy,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_signals < 1 {
            return Err(Error::Config("max_signals must be at least 1".into()));
        }
        if self.min_gap < 1 {
            return Err(Error::Config("min_gap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub eta_hat: ChangePoints,
    pub psi_hat: SignalConfig,
    /// Loss-sum objective including the penalty.
    pub objective: f64,
    /// Per-candidate-order table when cross-validation picked the order.
    pub cv_table: Option<Vec<CvRow>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvRow {
    pub segments: usize,
    pub cv_error: f64,
    pub eta: Vec<usize>,
}

fn column_prefix_sums(lossmat: &Array2<f64>) -> Array2<f64> {
    let (n, l) = lossmat.dim();
    let mut pref = Array2::<f64>::zeros((n + 1, l));
    for i in 0..n {
        for c in 0..l {
            pref[(i + 1, c)] = pref[(i, c)] + lossmat[(i, c)];
        }
    }
    pref
}

/// Cost of a configuration given by sorted boundaries (change points), where
/// segment r (1-based) covers samples (boundary_{r-1}, boundary_r] and uses
/// loss column r.
fn boundaries_cost(pref: &Array2<f64>, boundaries: &[usize], n: usize) -> f64 {
    let mut cost = 0.0;
    let mut start = 0usize;
    for (r, &b) in boundaries.iter().enumerate() {
        cost += pref[(b, r)] - pref[(start, r)];
        start = b;
    }
    cost += pref[(n, boundaries.len())] - pref[(start, boundaries.len())];
    cost
}

fn result_from_changes(
    lossmat: &Array2<f64>,
    cfg: &SearchConfig,
    changes: Vec<usize>,
    raw_cost: f64,
) -> Result<SegmentationResult> {
    let n = lossmat.nrows();
    let k = changes.len();
    let eta_hat = ChangePoints::new(changes, n)?;
    let psi_hat = SignalConfig::from_changepoints(&eta_hat);
    Ok(SegmentationResult {
        eta_hat,
        psi_hat,
        objective: raw_cost + cfg.penalty.value(k, n),
        cv_table: None,
    })
}

/// Global minimizer over configurations with exactly k change points, by
/// dynamic programming over (segment, position). Runs in O(n k) after the
/// prefix sums.
pub fn search_exhaustive(
    lossmat: &Array2<f64>,
    cfg: &SearchConfig,
    k: usize,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    let (n, l) = lossmat.dim();
    if k + 1 > l {
        return Err(Error::Config(format!(
            "{k} change points need {} loss columns, matrix has {l}",
            k + 1
        )));
    }
    let m = cfg.min_gap;
    if n < (k + 1) * m {
        return Err(Error::Config(format!(
            "{k} change points with min segment length {m} cannot fit in {n} samples"
        )));
    }
    let pref = column_prefix_sums(lossmat);
    if k == 0 {
        let cost = pref[(n, 0)];
        return result_from_changes(lossmat, cfg, vec![], cost);
    }

    // dp[i] = best cost of covering samples 1..=i with the first r segments;
    // from[r][i] = best previous boundary
    let big = f64::INFINITY;
    let mut dp = vec![big; n + 1];
    let mut from = vec![vec![0usize; n + 1]; k + 2];
    for i in m..=n {
        dp[i] = pref[(i, 0)];
    }
    for r in 2..=(k + 1) {
        let col = r - 1; // 0-based loss column for segment r
        let mut next = vec![big; n + 1];
        // running minimum of dp[j] - pref[j, col] over feasible j <= i - m;
        // boundaries stop at n-2 so every change point stays below n
        let mut best = big;
        let mut best_j = 0usize;
        for i in (r * m)..=n {
            let j = i - m; // newest candidate boundary
            if j + 1 < n {
                let cand = dp[j] - pref[(j, col)];
                if cand < best {
                    best = cand;
                    best_j = j;
                }
            }
            if best < big {
                next[i] = best + pref[(i, col)];
                from[r][i] = best_j;
            }
        }
        dp = next;
    }
    if !dp[n].is_finite() {
        return Err(Error::Config(
            "no feasible segmentation under the given min_gap".into(),
        ));
    }
    // backtrack boundaries
    let mut changes = vec![0usize; k];
    let mut pos = n;
    for r in (2..=(k + 1)).rev() {
        pos = from[r][pos];
        changes[r - 2] = pos + 1; // first index of segment r, 1-based
    }
    let raw = dp[n];
    result_from_changes(lossmat, cfg, changes, raw)
}

/// Greedy insertion: starting from no change points, repeatedly add the
/// single change point that most improves the relabeled objective, k times.
/// Ties break toward the smallest index.
pub fn search_greedy(
    lossmat: &Array2<f64>,
    cfg: &SearchConfig,
    k: usize,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    let (n, l) = lossmat.dim();
    if k + 1 > l {
        return Err(Error::Config(format!(
            "{k} change points need {} loss columns, matrix has {l}",
            k + 1
        )));
    }
    let m = cfg.min_gap;
    if n < (k + 1) * m {
        return Err(Error::Config(format!(
            "{k} change points with min segment length {m} cannot fit in {n} samples"
        )));
    }
    let pref = column_prefix_sums(lossmat);
    let mut boundaries: Vec<usize> = Vec::new(); // values in 1..n-1: last sample index of each closed segment
    let mut cost = boundaries_cost(&pref, &boundaries, n);
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        // boundary b is the last sample of the left part; b <= n-2 keeps the
        // change point b+1 below n
        for b in m..=(n - m).min(n - 2) {
            if boundaries.contains(&b) {
                continue;
            }
            let mut cand: Vec<usize> = boundaries.clone();
            let idx = cand.partition_point(|&v| v < b);
            cand.insert(idx, b);
            // every segment must keep min length
            let mut prev = 0usize;
            let mut ok = true;
            for &bb in cand.iter().chain(std::iter::once(&n)) {
                if bb - prev < m {
                    ok = false;
                    break;
                }
                prev = bb;
            }
            if !ok {
                continue;
            }
            let c = boundaries_cost(&pref, &cand, n);
            // candidates are scanned in ascending order, so strict
            // improvement breaks ties toward the smallest index
            let better = match best {
                None => true,
                Some((bc, _)) => c < bc,
            };
            if better {
                best = Some((c, b));
            }
        }
        let (c, b) = best.ok_or_else(|| {
            Error::Config("no feasible insertion point under the given min_gap".into())
        })?;
        let idx = boundaries.partition_point(|&v| v < b);
        boundaries.insert(idx, b);
        cost = c;
    }
    let changes: Vec<usize> = boundaries.iter().map(|&b| b + 1).collect();
    result_from_changes(lossmat, cfg, changes, cost)
}

/// Dispatch on the configured strategy.
pub fn search(lossmat: &Array2<f64>, cfg: &SearchConfig, k: usize) -> Result<SegmentationResult> {
    match cfg.strategy {
        SearchStrategy::Exhaustive => search_exhaustive(lossmat, cfg, k),
        SearchStrategy::Greedy => search_greedy(lossmat, cfg, k),
    }
}

/// Penalized selection over the change point count: min over k of the
/// searched objective (which already includes the penalty).
pub fn select_penalized(lossmat: &Array2<f64>, cfg: &SearchConfig) -> Result<SegmentationResult> {
    let mut best: Option<SegmentationResult> = None;
    for k in 0..cfg.max_signals {
        let res = search(lossmat, cfg, k)?;
        let replace = match &best {
            None => true,
            Some(b) => res.objective < b.objective,
        };
        if replace {
            best = Some(res);
        }
    }
    best.ok_or_else(|| Error::Config("max_signals must be at least 1".into()))
}

/// Family of priors used to build exact-order weights inside CV.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderPriorFamily {
    ExactUniform,
    SpacedUniform { min_gap: usize },
}

impl OrderPriorFamily {
    /// Prior over configurations with exactly `segments - 1` change points.
    pub fn with_order(&self, segments: usize) -> ChangePointPrior {
        match *self {
            OrderPriorFamily::ExactUniform => ChangePointPrior::ExactUniform { segments },
            OrderPriorFamily::SpacedUniform { min_gap } => {
                ChangePointPrior::SpacedUniform { segments, min_gap }
            }
        }
    }
}

/// Map a change point vector found on a subset of rows back to the full
/// index range: each subset boundary becomes the original index of the
/// training sample that starts the new segment.
fn lift_changes(train_idx: &[usize], eta_sub: &[usize]) -> Vec<usize> {
    eta_sub.iter().map(|&e| train_idx[e - 1] + 1).collect()
}

/// Estimate the number of change points by k-fold cross-validation and
/// return the full-data segmentation at the selected order.
///
/// Folds interleave samples (fold of sample i is (i + seed) mod folds) so
/// every fold spans all segments. For each candidate order, exact-order
/// weights are built, training folds are fit and segmented, the training
/// configuration is extended to held-out indices by segment membership, and
/// the held-out absolute prediction error |y - mu(theta)| is averaged; mu is
/// the identity except for the logistic loss, where it is the logistic
/// function.
///
/// The selected order is the smallest one whose mean CV error lies within
/// one fold-level standard error of the minimum. Plain minimization of the
/// absolute CV error systematically pays for one spurious change point once
/// the sample ratio is large; the parsimony margin removes that without
/// touching genuine detections.
pub fn select_order_cv(
    data: &Dataset,
    loss: Loss,
    prior_family: OrderPriorFamily,
    cfg: &SearchConfig,
    folds: usize,
    seed: u64,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    let n = data.n();
    if folds < 2 || folds > n {
        return Err(Error::Config(format!(
            "cross-validation needs 2 <= folds <= n, got folds = {folds}, n = {n}"
        )));
    }
    let mean = match loss {
        Loss::Logistic => GlmKind::Logistic,
        _ => GlmKind::Linear,
    };
    let offset = (seed % folds as u64) as usize;
    let fold_of = |i: usize| (i + offset) % folds;

    let orders: Vec<usize> = (1..=cfg.max_signals).collect();
    let cv_errors: Vec<Result<Vec<f64>>> = orders
        .par_iter()
        .map(|&segments| {
            let prior = prior_family.with_order(segments);
            let full_w = prior.marginal_weights(n)?;
            let mut fold_means = Vec::with_capacity(folds);
            for f in 0..folds {
                let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of(i) != f).collect();
                if train_idx.len() < segments * cfg.min_gap {
                    return Err(Error::Config(format!(
                        "fold {f} leaves {} training samples, too few for {segments} segments",
                        train_idx.len()
                    )));
                }
                let x_tr = data.x.select(ndarray::Axis(0), &train_idx);
                let y_tr = data.y.select(ndarray::Axis(0), &train_idx);
                let w_tr = crate::weights::WeightMatrix::new(
                    full_w.matrix().select(ndarray::Axis(0), &train_idx),
                )?;
                let ds_tr = Dataset::new(x_tr, y_tr)?;
                let fit = fit_weighted_erm(&ds_tr, loss, &w_tr, 0.0)?;
                let lm = loss_matrix(&fit, &ds_tr, loss);
                let seg = search(&lm, cfg, segments - 1)?;
                // lift the training configuration to all indices
                let eta_full = lift_changes(&train_idx, seg.eta_hat.positions());
                let cp_full = ChangePoints::new(
                    eta_full.into_iter().filter(|&e| e > 1 && e < n).collect(),
                    n,
                )?;
                let psi_full = SignalConfig::from_changepoints(&cp_full);
                // held-out prediction error
                let theta_all = data.x.dot(&fit.b_hat);
                let mut err = 0.0;
                let mut count = 0usize;
                for i in 0..n {
                    if fold_of(i) == f {
                        let lab = psi_full.label(i + 1).min(theta_all.ncols());
                        let pred = mean.mean(theta_all[(i, lab - 1)]);
                        err += (data.y[i] - pred).abs();
                        count += 1;
                    }
                }
                fold_means.push(err / count.max(1) as f64);
            }
            Ok(fold_means)
        })
        .collect();

    let mut table = Vec::with_capacity(orders.len());
    let mut means = Vec::with_capacity(orders.len());
    for (&segments, err) in orders.iter().zip(cv_errors.into_iter()) {
        let fold_means = err?;
        let m = fold_means.iter().sum::<f64>() / fold_means.len() as f64;
        table.push((segments, m));
        means.push((segments, m, fold_means));
    }
    let (_, best_mean, best_folds) = means
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let var = best_folds
        .iter()
        .map(|v| (v - best_mean) * (v - best_mean))
        .sum::<f64>()
        / (best_folds.len().saturating_sub(1).max(1)) as f64;
    let margin = (var / best_folds.len() as f64).sqrt();
    let chosen = means
        .iter()
        .find(|(_, m, _)| *m <= best_mean + margin)
        .map(|(s, _, _)| *s)
        .unwrap();

    // full-data segmentation at the chosen order
    let prior = prior_family.with_order(chosen);
    let w = prior.marginal_weights(n)?;
    let fit = fit_weighted_erm(data, loss, &w, 0.0)?;
    let lm = loss_matrix(&fit, data, loss);
    let mut result = search(&lm, cfg, chosen - 1)?;

    // record the selected eta per candidate order for the report
    let mut rows = Vec::with_capacity(table.len());
    for (segments, err) in table {
        let eta = if segments == chosen {
            result.eta_hat.positions().to_vec()
        } else {
            let prior = prior_family.with_order(segments);
            let w = prior.marginal_weights(n)?;
            let fit = fit_weighted_erm(data, loss, &w, 0.0)?;
            let lm = loss_matrix(&fit, data, loss);
            search(&lm, cfg, segments - 1)?.eta_hat.positions().to_vec()
        };
        rows.push(CvRow {
            segments,
            cv_error: err,
            eta,
        });
    }
    result.cv_table = Some(rows);
    Ok(result)
}
