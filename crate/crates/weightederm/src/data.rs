//! Domain data model: datasets, signal configurations, change point vectors,
//! GLM links and noise laws, and the Hausdorff metric.
//!
//! Conventions used throughout the crate:
//! - Samples are indexed 1..=n in the public interface.
//! - A change point `eta` is the first index of a new segment, constrained to
//!   the open range (1, n). An empty vector means no change point.
//! - A signal configuration `psi` assigns each sample the index of its
//!   generating regression vector; labels start at 1 and are consecutive in
//!   order of first appearance, so configurations biject with change point
//!   vectors.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::loss::sigmoid;
use crate::{Error, Result};

/// Ground-truth record attached to simulated datasets.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TruthMeta {
    /// True change point locations (sorted, 1-based, interior).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eta: Vec<usize>,
    /// Noise scale for linear-model runs. The logistic model's latent
    /// uniform variable has no free scale, so this stays `None` there.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    /// True signal matrix (p x L), kept in memory only (not in the sidecar).
    #[serde(skip)]
    pub b_true: Option<Array2<f64>>,
}

/// Observations: design matrix `x` (n x p), response `y` (n), optional truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub meta: Option<TruthMeta>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Validation(
                "design matrix must have at least one row and one column".into(),
            ));
        }
        if y.len() != x.nrows() {
            return Err(Error::Validation(format!(
                "response length {} does not match design rows {}",
                y.len(),
                x.nrows()
            )));
        }
        Ok(Dataset { x, y, meta: None })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Sample ratio n/p.
    pub fn delta(&self) -> f64 {
        self.n() as f64 / self.p() as f64
    }

    /// Write as CSV: header `y,x1,..,xp`, one row per sample. Values carry 17
    /// significant digits so a load/save cycle is lossless.
    pub fn to_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "y")?;
        for j in 1..=self.p() {
            write!(out, ",x{j}")?;
        }
        writeln!(out)?;
        for i in 0..self.n() {
            write!(out, "{:.16e}", self.y[i])?;
            for j in 0..self.p() {
                write!(out, ",{:.16e}", self.x[(i, j)])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Read a CSV written by [`Dataset::to_csv`] (or any file with the same
    /// header convention: first column y, remaining columns covariates).
    pub fn from_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(&path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Validation("empty CSV file".into()))??;
        let p = header.split(',').count() - 1;
        if p == 0 {
            return Err(Error::Validation(
                "CSV header must contain y plus at least one covariate column".into(),
            ));
        }
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("bad number {s:?} on row {}", lineno + 2)))
            };
            ys.push(parse(fields.next().unwrap_or(""))?);
            let mut count = 0;
            for f in fields {
                xs.push(parse(f)?);
                count += 1;
            }
            if count != p {
                return Err(Error::Validation(format!(
                    "row {} has {} covariates, expected {}",
                    lineno + 2,
                    count,
                    p
                )));
            }
        }
        let n = ys.len();
        let x = Array2::from_shape_vec((n, p), xs)
            .map_err(|e| Error::Validation(format!("bad CSV shape: {e}")))?;
        Dataset::new(x, Array1::from_vec(ys))
    }

    /// Write the truth sidecar (keys: eta, noise_sd) next to a dataset CSV.
    pub fn write_meta<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let meta = self.meta.clone().unwrap_or_default();
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &meta)?;
        Ok(())
    }

    pub fn read_meta<P: AsRef<Path>>(&mut self, path: P) -> Result<()> {
        let file = std::fs::File::open(path)?;
        self.meta = Some(serde_json::from_reader(file)?);
        Ok(())
    }
}

/// Strictly increasing change point locations in the open range (1, n).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePoints {
    eta: Vec<usize>,
    n: usize,
}

impl ChangePoints {
    pub fn new(eta: Vec<usize>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("sample count must be positive".into()));
        }
        for (k, &e) in eta.iter().enumerate() {
            if e <= 1 || e >= n {
                return Err(Error::Validation(format!(
                    "change point {e} outside the open range (1, {n})"
                )));
            }
            if k > 0 && eta[k - 1] >= e {
                return Err(Error::Validation(format!(
                    "change points must be strictly increasing, got {} then {}",
                    eta[k - 1],
                    e
                )));
            }
        }
        Ok(ChangePoints { eta, n })
    }

    pub fn none(n: usize) -> Self {
        ChangePoints { eta: Vec::new(), n }
    }

    pub fn positions(&self) -> &[usize] {
        &self.eta
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of change points.
    pub fn count(&self) -> usize {
        self.eta.len()
    }

    /// Number of segments (change points + 1).
    pub fn segments(&self) -> usize {
        self.eta.len() + 1
    }

    /// Segment boundaries as fractions of n: 0 = a_0 < a_1 < .. < a_L = 1,
    /// where a_l = (eta_l - 1)/n is the fraction of samples before change l.
    pub fn fractions(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.eta.len() + 2);
        f.push(0.0);
        for &e in &self.eta {
            f.push((e - 1) as f64 / self.n as f64);
        }
        f.push(1.0);
        f
    }
}

/// Per-sample signal labels: psi_1 = 1 and each step stays or increments, so
/// labels are consecutive in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalConfig {
    psi: Vec<usize>,
}

impl SignalConfig {
    pub fn new(psi: Vec<usize>) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::Validation("signal configuration is empty".into()));
        }
        if psi[0] != 1 {
            return Err(Error::Validation(format!(
                "first label must be 1, got {}",
                psi[0]
            )));
        }
        for i in 1..psi.len() {
            if psi[i] != psi[i - 1] && psi[i] != psi[i - 1] + 1 {
                return Err(Error::Validation(format!(
                    "labels must stay or increment by one; index {} jumps {} -> {}",
                    i + 1,
                    psi[i - 1],
                    psi[i]
                )));
            }
        }
        Ok(SignalConfig { psi })
    }

    /// psi_i = l on [eta_{l-1}, eta_l) with eta_0 = 1 and the last segment
    /// closed at n.
    pub fn from_changepoints(eta: &ChangePoints) -> Self {
        let n = eta.n();
        let mut psi = vec![0usize; n];
        let mut label = 1usize;
        let mut next = eta.positions().first().copied();
        for (i, slot) in psi.iter_mut().enumerate() {
            let sample = i + 1;
            if let Some(e) = next {
                if sample == e {
                    label += 1;
                    next = eta.positions().get(label - 1).copied();
                }
            }
            *slot = label;
        }
        SignalConfig { psi }
    }

    /// Inverse of [`SignalConfig::from_changepoints`]: the positions where
    /// the label increments.
    pub fn changepoints(&self) -> ChangePoints {
        let eta = (1..self.psi.len())
            .filter(|&i| self.psi[i] != self.psi[i - 1])
            .map(|i| i + 1)
            .collect();
        ChangePoints {
            eta,
            n: self.psi.len(),
        }
    }

    pub fn n(&self) -> usize {
        self.psi.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.psi
    }

    /// 1-based label of 1-based sample i.
    pub fn label(&self, i: usize) -> usize {
        self.psi[i - 1]
    }

    pub fn segments(&self) -> usize {
        *self.psi.last().unwrap()
    }
}

/// Hausdorff distance between two finite point sets on the integer line:
/// the larger of the two directed sup-min distances.
///
/// Returns `Some(0.0)` when both sets are empty and `None` when exactly one
/// is empty (the error of a size-zero estimate is reported as undefined and
/// skipped by callers that aggregate).
pub fn hausdorff(a: &[usize], b: &[usize]) -> Option<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let mut sa: Vec<i64> = a.iter().map(|&v| v as i64).collect();
    let mut sb: Vec<i64> = b.iter().map(|&v| v as i64).collect();
    sa.sort_unstable();
    sb.sort_unstable();
    let d = directed(&sa, &sb).max(directed(&sb, &sa));
    Some(d as f64)
}

fn directed(from: &[i64], to: &[i64]) -> i64 {
    let mut worst = 0i64;
    for &x in from {
        let idx = to.partition_point(|&v| v < x);
        let mut best = i64::MAX;
        if idx < to.len() {
            best = best.min((to[idx] - x).abs());
        }
        if idx > 0 {
            best = best.min((x - to[idx - 1]).abs());
        }
        worst = worst.max(best);
    }
    worst
}

/// Link kind of the observation model y = q(x' beta, eps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmKind {
    /// q(z, v) = z + v with additive noise v.
    Linear,
    /// q(z, v) = 1{v <= zeta'(z)} with latent v ~ U[0,1]; y in {0,1}.
    Logistic,
}

impl GlmKind {
    pub fn link(self, z: f64, v: f64) -> f64 {
        match self {
            GlmKind::Linear => z + v,
            GlmKind::Logistic => {
                if v <= sigmoid(z) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Mean function used for held-out prediction error: identity for the
    /// linear model, zeta' for the logistic model.
    pub fn mean(self, z: f64) -> f64 {
        match self {
            GlmKind::Linear => z,
            GlmKind::Logistic => sigmoid(z),
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Noise distribution for the latent variable eps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDist {
    Gaussian { sd: f64 },
    StudentT {
        df: f64,
        /// Multiplier applied to the raw t draw.
        #[serde(default = "one")]
        scale: f64,
    },
    Laplace { scale: f64 },
    /// Latent uniform for the logistic link.
    Uniform01,
    /// No noise (exact linear responses).
    None,
}

impl NoiseDist {
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        use rand::RngExt;
        use rand_distr::Distribution;
        match *self {
            NoiseDist::Gaussian { sd } => {
                rand_distr::Normal::new(0.0, sd).expect("valid sd").sample(rng)
            }
            NoiseDist::StudentT { df, scale } => {
                scale
                    * rand_distr::StudentT::new(df)
                        .expect("valid dof")
                        .sample(rng)
            }
            NoiseDist::Laplace { scale } => {
                // inverse CDF
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            NoiseDist::Uniform01 => rng.random::<f64>(),
            NoiseDist::None => 0.0,
        }
    }

    /// Second moment, when finite and meaningful as additive noise.
    pub fn second_moment(&self) -> Option<f64> {
        match *self {
            NoiseDist::Gaussian { sd } => Some(sd * sd),
            NoiseDist::StudentT { df, scale } => {
                if df > 2.0 {
                    Some(scale * scale * df / (df - 2.0))
                } else {
                    None
                }
            }
            NoiseDist::Laplace { scale } => Some(2.0 * scale * scale),
            NoiseDist::Uniform01 => Some(1.0 / 3.0),
            NoiseDist::None => Some(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_from_changepoints_matches_definition() {
        let e = ChangePoints::new(vec![], 5).unwrap();
        assert_eq!(SignalConfig::from_changepoints(&e).labels(), &[1, 1, 1, 1, 1]);

        let e = ChangePoints::new(vec![3], 5).unwrap();
        assert_eq!(SignalConfig::from_changepoints(&e).labels(), &[1, 1, 2, 2, 2]);

        // enumerated by hand from the segment definition
        let e = ChangePoints::new(vec![2, 4], 5).unwrap();
        assert_eq!(SignalConfig::from_changepoints(&e).labels(), &[1, 2, 2, 3, 3]);
    }

    #[test]
    fn changepoints_from_config_inverts() {
        let c = SignalConfig::new(vec![1, 1, 1]).unwrap();
        assert_eq!(c.changepoints().positions(), &[] as &[usize]);

        let c = SignalConfig::new(vec![1, 2, 2]).unwrap();
        assert_eq!(c.changepoints().positions(), &[2]);

        let c = SignalConfig::new(vec![1, 1, 2, 3, 3]).unwrap();
        assert_eq!(c.changepoints().positions(), &[3, 4]);
    }

    #[test]
    fn bijection_round_trips_exhaustively_small_n() {
        // all change point vectors with up to 3 change points, n <= 12
        for n in 2..=12usize {
            let mut all: Vec<Vec<usize>> = vec![vec![]];
            for a in 2..n {
                all.push(vec![a]);
                for b in (a + 1)..n {
                    all.push(vec![a, b]);
                    for c in (b + 1)..n {
                        all.push(vec![a, b, c]);
                    }
                }
            }
            for eta in all {
                let cp = ChangePoints::new(eta.clone(), n).unwrap();
                let cfg = SignalConfig::from_changepoints(&cp);
                assert_eq!(cfg.changepoints(), cp, "n={n} eta={eta:?}");
            }
        }
    }

    #[test]
    fn bijection_round_trips_randomized_large_n() {
        use rand::RngExt;
        let mut rng = crate::rng::stream_rng(11, 0);
        for _ in 0..200 {
            let n = rng.random_range(50..=200usize);
            let k = rng.random_range(0..=4usize);
            let mut eta: Vec<usize> = (0..k * 4).map(|_| rng.random_range(2..n)).collect();
            eta.sort_unstable();
            eta.dedup();
            eta.truncate(k);
            let cp = ChangePoints::new(eta, n).unwrap();
            let cfg = SignalConfig::from_changepoints(&cp);
            assert_eq!(cfg.changepoints(), cp);
            let back = SignalConfig::new(cfg.labels().to_vec()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(ChangePoints::new(vec![1], 5).is_err()); // boundary
        assert!(ChangePoints::new(vec![5], 5).is_err()); // boundary
        assert!(ChangePoints::new(vec![3, 3], 6).is_err()); // non-increasing
        assert!(SignalConfig::new(vec![2, 2]).is_err()); // must start at 1
        assert!(SignalConfig::new(vec![1, 3]).is_err()); // label jump
        assert!(SignalConfig::new(vec![1, 2, 1]).is_err()); // decreasing
    }

    /// Oracle: max over both directions of min pairwise distance, by two
    /// nested loops.
    fn hausdorff_naive(a: &[usize], b: &[usize]) -> f64 {
        let dir = |x: &[usize], y: &[usize]| -> f64 {
            x.iter()
                .map(|&u| {
                    y.iter()
                        .map(|&v| (u as f64 - v as f64).abs())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        dir(a, b).max(dir(b, a))
    }

    #[test]
    fn hausdorff_examples() {
        assert_eq!(hausdorff(&[30, 60], &[30, 60]), Some(0.0));
        // directed distances 10 and max(10, 60)
        assert_eq!(hausdorff(&[30], &[40, 90]), Some(60.0));
        // the binding direction is 90 -> min(|90-10|, |90-50|) = 40
        assert_eq!(hausdorff(&[10, 50], &[12, 47, 90]), Some(40.0));
        assert_eq!(hausdorff(&[10, 50], &[12, 47, 90]), Some(hausdorff_naive(&[10, 50], &[12, 47, 90])));

        assert_eq!(hausdorff(&[], &[]), Some(0.0));
        assert_eq!(hausdorff(&[3], &[]), None);
        assert_eq!(hausdorff(&[], &[3]), None);
    }

    #[test]
    fn hausdorff_metric_axioms_randomized() {
        use rand::RngExt;
        let mut rng = crate::rng::stream_rng(5, 1);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            let k = rng.random_range(1..6usize);
            let mut v: Vec<usize> = (0..k).map(|_| rng.random_range(1..60usize)).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for _ in 0..300 {
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let c = draw(&mut rng);
            let dab = hausdorff(&a, &b).unwrap();
            let dba = hausdorff(&b, &a).unwrap();
            let dac = hausdorff(&a, &c).unwrap();
            let dcb = hausdorff(&c, &b).unwrap();
            assert_eq!(dab, dba);
            assert_eq!(hausdorff(&a, &a), Some(0.0));
            if dab == 0.0 {
                assert_eq!(a, b);
            }
            assert!(dab <= dac + dcb + 1e-12, "triangle: {a:?} {b:?} {c:?}");
            assert_eq!(dab, hausdorff_naive(&a, &b));
        }
    }

    #[test]
    fn links_behave() {
        assert_eq!(GlmKind::Linear.link(1.5, 0.0), 1.5);
        assert_eq!(GlmKind::Linear.link(1.5, -2.0), -0.5);
        for &(z, v) in &[(0.0, 0.3), (2.0, 0.9), (-3.0, 0.01), (5.0, 0.5)] {
            let y = GlmKind::Logistic.link(z, v);
            assert!(y == 0.0 || y == 1.0);
        }
        // v <= sigmoid(z) fires the indicator
        assert_eq!(GlmKind::Logistic.link(0.0, 0.4), 1.0);
        assert_eq!(GlmKind::Logistic.link(0.0, 0.6), 0.0);
    }

    #[test]
    fn dataset_csv_round_trip_is_lossless() {
        use rand::RngExt;
        let mut rng = crate::rng::stream_rng(3, 9);
        let n = 17;
        let p = 4;
        let x = Array2::from_shape_fn((n, p), |_| rng.random::<f64>() * 3.0 - 1.5);
        let y = Array1::from_shape_fn(n, |_| rng.random::<f64>() * 1e6 - 5e5);
        let mut ds = Dataset::new(x, y).unwrap();
        ds.meta = Some(TruthMeta {
            eta: vec![5, 11],
            noise_sd: Some(0.3),
            b_true: None,
        });
        let dir = std::env::temp_dir().join("weightederm-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("ds.csv");
        let meta = dir.join("ds.meta.json");
        ds.to_csv(&csv).unwrap();
        ds.write_meta(&meta).unwrap();
        let mut back = Dataset::from_csv(&csv).unwrap();
        back.read_meta(&meta).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        let m = back.meta.unwrap();
        assert_eq!(m.eta, vec![5, 11]);
        assert_eq!(m.noise_sd, Some(0.3));
    }

    #[test]
    fn noise_second_moments() {
        assert_eq!(NoiseDist::Gaussian { sd: 2.0 }.second_moment(), Some(4.0));
        assert_eq!(
            NoiseDist::StudentT { df: 4.0, scale: 1.0 }.second_moment(),
            Some(2.0)
        );
        assert_eq!(NoiseDist::Laplace { scale: 1.0 }.second_moment(), Some(2.0));
        assert_eq!(NoiseDist::StudentT { df: 1.5, scale: 1.0 }.second_moment(), None);
    }
}
