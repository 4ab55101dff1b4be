//! Change point priors and their per-sample marginal weights.
//!
//! A prior over change point configurations induces, for each sample index i
//! and signal label l, the marginal probability that sample i was generated
//! by signal l. Those marginals are the sample weights driving the weighted
//! fits. Each prior also exposes its continuum limit: the weight profile
//! Phi_l(t) that the i-th weight approaches at t = i/n as n grows.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ChangePoints, SignalConfig};
use crate::linalg::ln_binomial;
use crate::{Error, Result};

/// Prior over change point configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChangePointPrior {
    /// Exactly `segments - 1` change points, uniform over all placements.
    ExactUniform { segments: usize },
    /// Number of segments uniform on {1, .., max_segments}; locations
    /// uniform conditional on the count.
    AtMostUniform { max_segments: usize },
    /// Exactly `segments - 1` change points, uniform over placements that
    /// are at least `min_gap` apart from each other and from the endpoints.
    SpacedUniform { segments: usize, min_gap: usize },
    /// Exactly two change points produced by two alternating signals: the
    /// first and third segments share signal 1, the middle one is signal 2.
    Alternating,
    /// Explicit probability table over change point vectors.
    Custom { table: Vec<CustomEntry> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomEntry {
    pub eta: Vec<usize>,
    pub prob: f64,
}

/// Per-sample, per-signal weight matrix (n x L, rows sum to one).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightMatrix {
    pi: Array2<f64>,
}

impl WeightMatrix {
    pub fn new(pi: Array2<f64>) -> Result<Self> {
        for (i, row) in pi.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !(v >= 0.0) {
                    return Err(Error::Validation(format!(
                        "weight row {} has a negative or NaN entry",
                        i + 1
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-8 {
                return Err(Error::Validation(format!(
                    "weight row {} sums to {sum}, expected 1",
                    i + 1
                )));
            }
        }
        Ok(WeightMatrix { pi })
    }

    pub fn n(&self) -> usize {
        self.pi.nrows()
    }

    /// Number of signal columns.
    pub fn signals(&self) -> usize {
        self.pi.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.pi
    }

    /// Weight of 1-based sample i for 1-based signal l.
    pub fn get(&self, i: usize, l: usize) -> f64 {
        self.pi[(i - 1, l - 1)]
    }

    /// All-ones single column (the unweighted homogeneous case).
    pub fn constant(n: usize) -> Self {
        WeightMatrix {
            pi: Array2::ones((n, 1)),
        }
    }
}

fn binom_ratio(top: &[(usize, usize)], bottom: (usize, usize)) -> f64 {
    let ln: f64 = top.iter().map(|&(n, k)| ln_binomial(n, k)).sum::<f64>()
        - ln_binomial(bottom.0, bottom.1);
    ln.exp()
}

impl ChangePointPrior {
    /// Number of weight columns (distinct signals).
    pub fn signals(&self) -> usize {
        match self {
            ChangePointPrior::ExactUniform { segments } => *segments,
            ChangePointPrior::AtMostUniform { max_segments } => *max_segments,
            ChangePointPrior::SpacedUniform { segments, .. } => *segments,
            ChangePointPrior::Alternating => 2,
            ChangePointPrior::Custom { table } => table
                .iter()
                .map(|e| e.eta.len() + 1)
                .max()
                .unwrap_or(1),
        }
    }

    /// Exact marginal weights at sample size n.
    pub fn marginal_weights(&self, n: usize) -> Result<WeightMatrix> {
        let l_total = self.signals();
        if n < l_total {
            return Err(Error::Config(format!(
                "need n >= {l_total} samples for {l_total} signals, got {n}"
            )));
        }
        let pi = match self {
            ChangePointPrior::ExactUniform { segments } => exact_uniform_marginals(n, *segments),
            ChangePointPrior::AtMostUniform { max_segments } => {
                atmost_uniform_marginals(n, *max_segments)
            }
            ChangePointPrior::SpacedUniform { segments, min_gap } => {
                spaced_uniform_marginals(n, *segments, *min_gap)?
            }
            ChangePointPrior::Alternating => alternating_marginals(n),
            ChangePointPrior::Custom { table } => custom_marginals(n, table)?,
        };
        WeightMatrix::new(pi)
    }

    /// Continuum weight profile Phi_l(t) for t in [0,1], 1-based l.
    pub fn limit_weight(&self, t: f64, l: usize) -> Result<f64> {
        Ok(self.limit_profile(&[t])?[0][l - 1])
    }

    /// Evaluate the full profile row [Phi_1(t), .., Phi_L(t)] at each t.
    /// Priors without a closed-form limit are evaluated through their
    /// marginals at n = 100_000.
    pub fn limit_profile(&self, ts: &[f64]) -> Result<Vec<Vec<f64>>> {
        let l_total = self.signals();
        match self {
            ChangePointPrior::ExactUniform { segments } => Ok(ts
                .iter()
                .map(|&t| {
                    (1..=*segments)
                        .map(|l| bernstein(*segments, l, t))
                        .collect()
                })
                .collect()),
            ChangePointPrior::AtMostUniform { max_segments } => {
                let lmax = *max_segments;
                Ok(ts
                    .iter()
                    .map(|&t| {
                        (1..=lmax)
                            .map(|l| {
                                (l..=lmax)
                                    .map(|k| bernstein(k, l, t))
                                    .sum::<f64>()
                                    / lmax as f64
                            })
                            .collect()
                    })
                    .collect())
            }
            ChangePointPrior::Alternating => Ok(ts
                .iter()
                .map(|&t| {
                    let p2 = 2.0 * t * (1.0 - t);
                    vec![1.0 - p2, p2]
                })
                .collect()),
            ChangePointPrior::SpacedUniform { .. } | ChangePointPrior::Custom { .. } => {
                let n = 100_000;
                let w = self.marginal_weights(n)?;
                Ok(ts
                    .iter()
                    .map(|&t| {
                        let i = ((n as f64 * t.clamp(0.0, 1.0)).floor() as usize).min(n - 1) + 1;
                        (1..=l_total).map(|l| w.get(i, l)).collect()
                    })
                    .collect())
            }
        }
    }

    /// Log prior mass of a change point vector; `-inf` off the support.
    pub fn log_prior(&self, eta: &ChangePoints) -> f64 {
        let n = eta.n();
        let k = eta.count();
        match self {
            ChangePointPrior::ExactUniform { segments } => {
                if k == segments - 1 {
                    -ln_binomial(n - 1, k)
                } else {
                    f64::NEG_INFINITY
                }
            }
            ChangePointPrior::AtMostUniform { max_segments } => {
                if k < *max_segments {
                    -(*max_segments as f64).ln() - ln_binomial(n - 1, k)
                } else {
                    f64::NEG_INFINITY
                }
            }
            ChangePointPrior::SpacedUniform { segments, min_gap } => {
                if k != segments - 1 || !spaced_admissible(eta.positions(), n, *min_gap) {
                    return f64::NEG_INFINITY;
                }
                match spaced_total(n, k, *min_gap) {
                    Some(total) if total > 0.0 => -total.ln(),
                    _ => f64::NEG_INFINITY,
                }
            }
            ChangePointPrior::Alternating => {
                if k == 2 {
                    -ln_binomial(n - 1, 2)
                } else {
                    f64::NEG_INFINITY
                }
            }
            ChangePointPrior::Custom { table } => table
                .iter()
                .find(|e| e.eta == eta.positions())
                .map(|e| e.prob.ln())
                .unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// Bernstein basis value C(L-1, l-1) t^(l-1) (1-t)^(L-l).
fn bernstein(segments: usize, l: usize, t: f64) -> f64 {
    let coef = ln_binomial(segments - 1, l - 1).exp();
    coef * t.powi((l - 1) as i32) * (1.0 - t).powi((segments - l) as i32)
}

/// Closed form: pi_i(l) = C(i-1, l-1) C(n-i, L-l) / C(n-1, L-1).
fn exact_uniform_marginals(n: usize, segments: usize) -> Array2<f64> {
    let l_total = segments;
    Array2::from_shape_fn((n, l_total), |(i0, l0)| {
        let i = i0 + 1;
        let l = l0 + 1;
        binom_ratio(&[(i - 1, l - 1), (n - i, l_total - l)], (n - 1, l_total - 1))
    })
}

/// pi_i(l) = (1/L) sum_{k=l}^{L} C(i-1, l-1) C(n-i, k-l) / C(n-1, k-1).
fn atmost_uniform_marginals(n: usize, max_segments: usize) -> Array2<f64> {
    let lmax = max_segments;
    Array2::from_shape_fn((n, lmax), |(i0, l0)| {
        let i = i0 + 1;
        let l = l0 + 1;
        (l..=lmax)
            .map(|k| binom_ratio(&[(i - 1, l - 1), (n - i, k - l)], (n - 1, k - 1)))
            .sum::<f64>()
            / lmax as f64
    })
}

/// Marginal mass that sample i lies in segment 1 or 3 (column 1) versus the
/// middle segment (column 2), under a uniform prior on the two change points.
fn alternating_marginals(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 2), |(i0, l0)| {
        let i = i0 + 1;
        let middle = binom_ratio(&[(i - 1, 1), (n - i, 1)], (n - 1, 2));
        if l0 == 1 {
            middle
        } else {
            binom_ratio(&[(i - 1, 0), (n - i, 2)], (n - 1, 2))
                + binom_ratio(&[(i - 1, 2), (n - i, 0)], (n - 1, 2))
        }
    })
}

fn spaced_admissible(eta: &[usize], n: usize, g: usize) -> bool {
    if eta.is_empty() {
        return true;
    }
    if eta[0] < g + 1 || n - eta[eta.len() - 1] < g {
        return false;
    }
    eta.windows(2).all(|w| w[1] - w[0] >= g)
}

/// Number of admissible spaced configurations (None if k change points can
/// never fit).
fn spaced_total(n: usize, k: usize, g: usize) -> Option<f64> {
    if k == 0 {
        return Some(1.0);
    }
    let (fwd, _bwd, total) = spaced_tables(n, k, g);
    let _ = fwd;
    if total > 0.0 {
        Some(total)
    } else {
        None
    }
}

/// Counting tables over positions e in 1..=n (index 0 unused):
/// fwd[j][e] = placements of the first j change points with eta_j = e,
/// bwd[j][e] = placements of change points j..k with eta_j = e and the
/// right-end spacing satisfied. Positions respect eta_1 >= g+1 and pairwise
/// gaps >= g.
fn spaced_tables(n: usize, k: usize, g: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let mut fwd = vec![vec![0.0f64; n + 1]; k + 1];
    // virtual change point 0 at position 1
    fwd[0][1] = 1.0;
    for j in 1..=k {
        // prefix sums of fwd[j-1]
        let mut acc = 0.0;
        let mut pref = vec![0.0f64; n + 1];
        for e in 1..=n {
            acc += fwd[j - 1][e];
            pref[e] = acc;
        }
        for e in 2..n {
            // previous change point at most e - g
            if e >= g {
                fwd[j][e] = pref[e - g];
            }
        }
    }
    let mut bwd = vec![vec![0.0f64; n + 2]; k + 2];
    for e in 2..n {
        if n - e >= g {
            bwd[k][e] = 1.0;
        }
    }
    for j in (1..k).rev() {
        // suffix sums of bwd[j+1]
        let mut acc = 0.0;
        let mut suf = vec![0.0f64; n + 2];
        for e in (1..=n).rev() {
            acc += bwd[j + 1][e];
            suf[e] = acc;
        }
        for e in 2..n {
            if e + g <= n {
                bwd[j][e] = suf[e + g];
            }
        }
    }
    let total: f64 = (2..n).map(|e| fwd[k][e] * bwd[k][e]).sum();
    (fwd, bwd, total)
}

/// O(nL) marginals for the spaced uniform prior via prefix products of the
/// forward/backward composition counts.
fn spaced_uniform_marginals(n: usize, segments: usize, g: usize) -> Result<Array2<f64>> {
    let k = segments - 1;
    if k == 0 {
        return Ok(Array2::ones((n, 1)));
    }
    if g == 0 {
        return Err(Error::Config("min_gap must be at least 1".into()));
    }
    let (fwd, bwd, total) = spaced_tables(n, k, g);
    if total <= 0.0 {
        return Err(Error::Config(format!(
            "no placement of {k} change points with min_gap {g} fits in n = {n} samples"
        )));
    }
    // suffix sums s_bwd[j][m] = sum_{e >= m} bwd[j][e]
    let mut s_bwd = vec![vec![0.0f64; n + 2]; k + 1];
    for j in 1..=k {
        for e in (1..=n).rev() {
            s_bwd[j][e] = s_bwd[j][e + 1] + bwd[j][e];
        }
    }
    // prefix sums of fwd
    let mut p_fwd = vec![vec![0.0f64; n + 1]; k + 1];
    for j in 0..=k {
        for e in 1..=n {
            p_fwd[j][e] = p_fwd[j][e - 1] + fwd[j][e];
        }
    }
    // H[l][e] = fwd[l-1][e] * s_bwd[l][e+g], prefix-summed
    let mut p_h = vec![vec![0.0f64; n + 1]; k + 2];
    for l in 1..=k {
        for e in 1..=n {
            let tail = if e + g <= n { s_bwd[l][e + g] } else { 0.0 };
            p_h[l][e] = p_h[l][e - 1] + fwd[l - 1][e] * tail;
        }
    }
    let mut pi = Array2::<f64>::zeros((n, segments));
    for i in 1..=n {
        for l in 1..=segments {
            let count = if l == segments {
                // all change points at or before i, last one leaving g room
                p_fwd[k][i.min(n - g)]
            } else {
                // change point l-1 at e <= i, change point l at e' > i with
                // e' >= e + g; split on whether e + g clears i + 1
                let cut = (i + 1).saturating_sub(g);
                let far = if cut >= 1 { p_fwd[l - 1][cut.min(n)] } else { 0.0 };
                let near_hi = p_h[l][i.min(n)];
                let near_lo = if cut >= 1 { p_h[l][cut.min(n)] } else { 0.0 };
                far * s_bwd[l][i + 1] + (near_hi - near_lo)
            };
            pi[(i - 1, l - 1)] = count / total;
        }
    }
    Ok(pi)
}

fn custom_marginals(n: usize, table: &[CustomEntry]) -> Result<Array2<f64>> {
    if table.is_empty() {
        return Err(Error::Config("custom prior table is empty".into()));
    }
    let mass: f64 = table.iter().map(|e| e.prob).sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "custom prior probabilities sum to {mass}, expected 1"
        )));
    }
    let l_total = table.iter().map(|e| e.eta.len() + 1).max().unwrap();
    let mut pi = Array2::<f64>::zeros((n, l_total));
    for entry in table {
        if entry.prob < 0.0 {
            return Err(Error::Config("custom prior has a negative probability".into()));
        }
        let cp = ChangePoints::new(entry.eta.clone(), n)?;
        let cfg = SignalConfig::from_changepoints(&cp);
        for i in 1..=n {
            pi[(i - 1, cfg.label(i) - 1)] += entry.prob;
        }
    }
    Ok(pi)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force marginals by enumerating every segmentation of n samples
    /// into consecutive nonempty segments: the segment starts range over
    /// {2..=n} (a cut in each of the n-1 gaps), which is the configuration
    /// space the combinatorial weight formulas count. `admit` filters start
    /// vectors; `label` maps (segment index, start vector) to the signal
    /// index, so the alternating prior can fold segment 3 onto signal 1.
    fn brute_force(
        n: usize,
        ks: &[usize],
        l_total: usize,
        admit: impl Fn(&[usize]) -> bool,
        mass: impl Fn(&[usize]) -> f64,
        label: impl Fn(usize) -> usize,
    ) -> Array2<f64> {
        let mut pi = Array2::<f64>::zeros((n, l_total));
        for &k in ks {
            let mut stack: Vec<Vec<usize>> = vec![vec![]];
            while let Some(cur) = stack.pop() {
                if cur.len() == k {
                    if admit(&cur) {
                        let m = mass(&cur);
                        for i in 1..=n {
                            let seg = 1 + cur.iter().filter(|&&s| s <= i).count();
                            pi[(i - 1, label(seg) - 1)] += m;
                        }
                    }
                    continue;
                }
                let lo = cur.last().map(|&e| e + 1).unwrap_or(2);
                for e in lo..=n {
                    let mut next = cur.clone();
                    next.push(e);
                    stack.push(next);
                }
            }
        }
        pi
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for ((i, j), &v) in a.indexed_iter() {
            assert!(
                (v - b[(i, j)]).abs() <= tol,
                "mismatch at ({i},{j}): {v} vs {}",
                b[(i, j)]
            );
        }
    }

    #[test]
    fn exact_uniform_matches_closed_values() {
        let w = ChangePointPrior::ExactUniform { segments: 3 }
            .marginal_weights(100)
            .unwrap();
        // first sample is always in segment 1
        assert!((w.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(w.get(1, 2).abs() < 1e-12);
        assert!(w.get(1, 3).abs() < 1e-12);
        // closed form at i = 50: C(49,1) C(50,1) / C(99,2) = 2450/4851
        assert!((w.get(50, 2) - 2450.0 / 4851.0).abs() < 1e-12);
    }

    #[test]
    fn exact_uniform_matches_brute_force() {
        let n = 30;
        let total = (-ln_binomial(n - 1, 2)).exp();
        let oracle = brute_force(n, &[2], 3, |_| true, |_| total, |seg| seg);
        let w = ChangePointPrior::ExactUniform { segments: 3 }
            .marginal_weights(n)
            .unwrap();
        assert_close(w.matrix(), &oracle, 1e-12);
    }

    #[test]
    fn atmost_uniform_matches_brute_force() {
        let n = 25;
        let lmax = 3;
        let oracle = brute_force(
            n,
            &[0, 1, 2],
            lmax,
            |_| true,
            |eta| {
                let k = eta.len();
                (1.0 / lmax as f64) * (-ln_binomial(n - 1, k)).exp()
            },
            |seg| seg,
        );
        let w = ChangePointPrior::AtMostUniform { max_segments: lmax }
            .marginal_weights(n)
            .unwrap();
        assert_close(w.matrix(), &oracle, 1e-12);
    }

    #[test]
    fn spaced_uniform_matches_brute_force() {
        for (n, segs, g) in [(40, 3, 4), (24, 4, 3), (30, 2, 5), (20, 3, 1)] {
            let k = segs - 1;
            let mut count = 0usize;
            let oracle_unnorm = brute_force(
                n,
                &[k],
                segs,
                |eta| spaced_admissible(eta, n, g),
                |_| 1.0,
                |seg| seg,
            );
            // count admissible configs to normalize
            let mut stack: Vec<Vec<usize>> = vec![vec![]];
            while let Some(cur) = stack.pop() {
                if cur.len() == k {
                    if spaced_admissible(&cur, n, g) {
                        count += 1;
                    }
                    continue;
                }
                let lo = cur.last().map(|&e| e + 1).unwrap_or(2);
                for e in lo..=n {
                    let mut next = cur.clone();
                    next.push(e);
                    stack.push(next);
                }
            }
            let oracle = oracle_unnorm / count as f64;
            let w = ChangePointPrior::SpacedUniform {
                segments: segs,
                min_gap: g,
            }
            .marginal_weights(n)
            .unwrap();
            assert_close(w.matrix(), &oracle, 1e-12);
        }
    }

    #[test]
    fn spaced_infeasible_gap_errors() {
        let err = ChangePointPrior::SpacedUniform {
            segments: 3,
            min_gap: 20,
        }
        .marginal_weights(40)
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn alternating_matches_brute_force() {
        let n = 30;
        let total = (-ln_binomial(n - 1, 2)).exp();
        let oracle = brute_force(
            n,
            &[2],
            2,
            |_| true,
            |_| total,
            |seg| if seg == 2 { 2 } else { 1 },
        );
        let w = ChangePointPrior::Alternating.marginal_weights(n).unwrap();
        assert_close(w.matrix(), &oracle, 1e-12);
    }

    #[test]
    fn custom_table_matches_direct_sum() {
        let table = vec![
            CustomEntry {
                eta: vec![3],
                prob: 0.25,
            },
            CustomEntry {
                eta: vec![5, 8],
                prob: 0.5,
            },
            CustomEntry {
                eta: vec![],
                prob: 0.25,
            },
        ];
        let w = ChangePointPrior::Custom { table }
            .marginal_weights(10)
            .unwrap();
        // sample 1: always label 1
        assert!((w.get(1, 1) - 1.0).abs() < 1e-12);
        // sample 4: label 2 under eta=[3] only
        assert!((w.get(4, 2) - 0.25).abs() < 1e-12);
        // sample 9: label 3 under eta=[5,8]
        assert!((w.get(9, 3) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rows_are_stochastic_for_every_kind() {
        let priors = vec![
            ChangePointPrior::ExactUniform { segments: 4 },
            ChangePointPrior::AtMostUniform { max_segments: 4 },
            ChangePointPrior::SpacedUniform {
                segments: 3,
                min_gap: 6,
            },
            ChangePointPrior::Alternating,
        ];
        for prior in priors {
            let w = prior.marginal_weights(80).unwrap();
            for i in 1..=80 {
                let sum: f64 = (1..=w.signals()).map(|l| w.get(i, l)).sum();
                assert!((sum - 1.0).abs() < 1e-12, "{prior:?} row {i} sums {sum}");
            }
        }
    }

    #[test]
    fn exact_uniform_single_segment_gives_ones() {
        let w = ChangePointPrior::ExactUniform { segments: 1 }
            .marginal_weights(12)
            .unwrap();
        assert_eq!(w.signals(), 1);
        for i in 1..=12 {
            assert_eq!(w.get(i, 1), 1.0);
        }
    }

    #[test]
    fn limit_profile_closed_forms() {
        // Bernstein value at L=3, l=2, t=0.5: 2 * 0.5 * 0.5
        let p = ChangePointPrior::ExactUniform { segments: 3 };
        assert!((p.limit_weight(0.5, 2).unwrap() - 0.5).abs() < 1e-14);
        // L=2, l=1: 1 - t
        let p2 = ChangePointPrior::ExactUniform { segments: 2 };
        assert!((p2.limit_weight(0.3, 1).unwrap() - 0.7).abs() < 1e-14);
        // profiles sum to one
        for prior in [
            ChangePointPrior::ExactUniform { segments: 3 },
            ChangePointPrior::AtMostUniform { max_segments: 3 },
            ChangePointPrior::Alternating,
        ] {
            let row = &prior.limit_profile(&[0.37]).unwrap()[0];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_converge_to_limit_profile() {
        let prior = ChangePointPrior::AtMostUniform { max_segments: 3 };
        let ts = [0.15, 0.4, 0.62, 0.88];
        let profile = prior.limit_profile(&ts).unwrap();
        let mut last = f64::INFINITY;
        for n in [100usize, 1000, 10000] {
            let w = prior.marginal_weights(n).unwrap();
            let mut worst = 0.0f64;
            for (j, &t) in ts.iter().enumerate() {
                let i = ((n as f64 * t).floor() as usize) + 1;
                for l in 1..=3 {
                    worst = worst.max((w.get(i, l) - profile[j][l - 1]).abs());
                }
            }
            assert!(worst < last, "profile error not shrinking at n={n}");
            last = worst;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn log_prior_values_and_support() {
        // the spaced prior's support lies strictly inside (1, n), so its
        // mass over representable change point vectors is exactly one
        let n = 18;
        let prior = ChangePointPrior::SpacedUniform {
            segments: 3,
            min_gap: 3,
        };
        let mut mass = 0.0;
        for a in 2..n {
            for b in (a + 1)..n {
                let cp = ChangePoints::new(vec![a, b], n).unwrap();
                mass += prior.log_prior(&cp).exp();
            }
        }
        assert!((mass - 1.0).abs() < 1e-10);
        // off-support configurations carry no mass
        assert_eq!(
            prior.log_prior(&ChangePoints::new(vec![2, 3], n).unwrap()),
            f64::NEG_INFINITY
        );

        // exact/at-most priors assign the combinatorial per-configuration
        // mass to any representable configuration
        let exact = ChangePointPrior::ExactUniform { segments: 3 };
        let cp = ChangePoints::new(vec![5, 9], n).unwrap();
        assert!((exact.log_prior(&cp) + ln_binomial(n - 1, 2)).abs() < 1e-12);
        assert_eq!(exact.log_prior(&ChangePoints::none(n)), f64::NEG_INFINITY);

        let atmost = ChangePointPrior::AtMostUniform { max_segments: 2 };
        let one = ChangePoints::new(vec![7], n).unwrap();
        assert!(
            (atmost.log_prior(&one) + (2.0f64).ln() + ln_binomial(n - 1, 1)).abs() < 1e-12
        );
    }
}
