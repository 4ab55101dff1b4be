//! Small dense numeric kernels: SPD solves, symmetric eigendecomposition for
//! tiny matrices, special functions. Everything here operates on `ndarray`
//! types and is sized for the shapes this crate actually meets (p up to a few
//! thousand for Cholesky, L <= 8 for the eigensolver).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` if a non-positive pivot is met.
pub fn cholesky(a: &ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Some(l)
}

/// Solve `L y = b` for lower triangular `L`.
pub fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solve `L^T x = y` for lower triangular `L`.
pub fn solve_lower_transpose(l: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve the SPD system `A x = b` via Cholesky.
#[cfg_attr(not(test), allow(dead_code))]
pub fn solve_spd(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Option<Array1<f64>> {
    let l = cholesky(a)?;
    let y = solve_lower(&l.view(), b);
    Some(solve_lower_transpose(&l.view(), &y.view()))
}

/// Inverse of a lower triangular matrix.
#[cfg_attr(not(test), allow(dead_code))]
pub fn invert_lower(l: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = solve_lower(l, &e.view());
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    inv
}

/// Solve a general small square system by Gaussian elimination with partial
/// pivoting. Returns `None` when the matrix is numerically singular.
pub fn solve_general(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut x = b.to_owned();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if m[(r, col)].abs() > m[(piv, col)].abs() {
                piv = r;
            }
        }
        if m[(piv, col)].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap((col, c), (piv, c));
            }
            x.swap(col, piv);
        }
        let d = m[(col, col)];
        for r in (col + 1)..n {
            let f = m[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[(r, c)] -= f * m[(col, c)];
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= m[(i, k)] * x[k];
        }
        x[i] = s / m[(i, i)];
    }
    Some(x)
}

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns).
pub fn sym_eigen(a: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    // symmetrize defensively against tiny asymmetries from accumulation
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let evals = Array1::from_iter((0..n).map(|i| m[(i, i)]));
    (evals, v)
}

/// Project a symmetric matrix onto the SPD cone by clipping eigenvalues from
/// below at `floor`.
pub fn spd_clip(a: &ArrayView2<f64>, floor: f64) -> Array2<f64> {
    let n = a.nrows();
    let (evals, vecs) = sym_eigen(a);
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let lam = evals[k].max(floor);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += lam * vecs[(i, k)] * vecs[(j, k)];
            }
        }
    }
    out
}

/// Natural log of the gamma function (Lanczos approximation, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().abs().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// log of the binomial coefficient C(n, k); `-inf` outside the support.
/// Small k is summed directly so the common small-order coefficients are
/// accurate to machine precision even for n in the millions.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    if k == 0 {
        return 0.0;
    }
    if k <= 64 {
        return (0..k)
            .map(|j| (((n - j) as f64) / ((k - j) as f64)).ln())
            .sum();
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Nodes and weights of the n-point Gauss-Hermite rule (physicists'
/// convention: integrates f against exp(-x^2) on the real line).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let pi_m4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        // initial guesses from Numerical Recipes' gauher
        z = match i {
            0 => ((2 * n + 1) as f64).sqrt() - 1.85575 * ((2 * n + 1) as f64).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // evaluate the orthonormal Hermite polynomial and derivative
            let mut p1 = pi_m4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // gauher orders roots descending; flip for ascending nodes
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = array![1.0, 2.0, 3.0];
        let x = solve_spd(&a.view(), &b.view()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_none());
    }

    #[test]
    fn lower_inverse_matches_identity() {
        let a = array![[2.0, 0.0], [1.0, 3.0]];
        let inv = invert_lower(&a.view());
        let prod = a.dot(&inv);
        assert!((prod[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((prod[(1, 1)] - 1.0).abs() < 1e-14);
        assert!(prod[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn jacobi_eigen_recovers_diagonal() {
        let a = array![[3.0, 1.0], [1.0, 3.0]];
        let (evals, vecs) = sym_eigen(&a.view());
        let mut ev: Vec<f64> = evals.to_vec();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ev[0] - 2.0).abs() < 1e-10);
        assert!((ev[1] - 4.0).abs() < 1e-10);
        // reconstruct
        let mut rec = Array2::<f64>::zeros((2, 2));
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    rec[(i, j)] += evals[k] * vecs[(i, k)] * vecs[(j, k)];
                }
            }
        }
        assert!((rec - a).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn spd_clip_floors_negative_modes() {
        let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3, -1
        let c = spd_clip(&a.view(), 1e-8);
        assert!(cholesky(&c.view()).is_some());
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..15usize {
            let expected: f64 = (1..n).map(|k| (k as f64).ln()).sum();
            assert!((ln_gamma(n as f64) - expected).abs() < 1e-10, "n={n}");
        }
        // half-integer value: Gamma(1/2) = sqrt(pi)
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-10);
    }

    #[test]
    fn ln_binomial_exact_small() {
        assert!((ln_binomial(5, 2) - 10.0f64.ln()).abs() < 1e-12);
        assert!((ln_binomial(99, 2) - 4851.0f64.ln()).abs() < 1e-11);
        assert_eq!(ln_binomial(3, 7), f64::NEG_INFINITY);
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(32);
        let total: f64 = w.iter().sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12);
        // second moment of N(0,1): (1/sqrt(pi)) sum w x^2 * 2 = 1 after the
        // change of variables z = sqrt(2) x
        let m2: f64 = x
            .iter()
            .zip(&w)
            .map(|(xi, wi)| wi * 2.0 * xi * xi)
            .sum::<f64>()
            / std::f64::consts::PI.sqrt();
        assert!((m2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn general_solve_handles_nonsymmetric() {
        let a = array![[0.0, 2.0], [3.0, 1.0]];
        let b = array![2.0, 5.0];
        let x = solve_general(&a.view(), &b.view()).unwrap();
        assert!((x[0] - (4.0 / 3.0)).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }
}
