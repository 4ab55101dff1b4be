//! Base loss functions and their scalar proximal operators.
//!
//! Each loss exposes the derivatives the fixed-point system consumes:
//! `du` (first argument), `duu`, `duuu`, the cross derivative `duv`, and
//! `duuv`. Naming: a trailing `u` differentiates in the first argument, a
//! trailing `v` in the second.
//!
//! The squared loss carries the 1/2 factor, `(u - v)^2 / 2`, so that the
//! Huber loss is its exact extension inside the threshold. A plain
//! `(u - v)^2` differs only by a constant factor, which rescales the prox
//! scale and weights consistently and moves no minimizer.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Numerically stable log(1 + e^z).
pub fn log1pexp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic function, the derivative of log(1 + e^z).
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Default Huber threshold (the standard 95%-efficiency value).
pub const HUBER_TAU_DEFAULT: f64 = 1.345;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// (u - v)^2 / 2
    Squared,
    /// Quadratic inside |u - v| <= tau, linear outside. The second derivative
    /// at the kink is defined by its left limit (1).
    Huber { tau: f64 },
    /// log(1 + e^u) - v u
    Logistic,
}

impl Loss {
    pub fn huber_default() -> Self {
        Loss::Huber {
            tau: HUBER_TAU_DEFAULT,
        }
    }

    pub fn value(self, u: f64, v: f64) -> f64 {
        match self {
            Loss::Squared => 0.5 * (u - v) * (u - v),
            Loss::Huber { tau } => {
                let r = (u - v).abs();
                if r <= tau {
                    0.5 * r * r
                } else {
                    tau * (r - 0.5 * tau)
                }
            }
            Loss::Logistic => log1pexp(u) - v * u,
        }
    }

    /// dM/du
    pub fn du(self, u: f64, v: f64) -> f64 {
        match self {
            Loss::Squared => u - v,
            Loss::Huber { tau } => (u - v).clamp(-tau, tau),
            Loss::Logistic => sigmoid(u) - v,
        }
    }

    /// d2M/du2
    pub fn duu(self, u: f64, v: f64) -> f64 {
        match self {
            Loss::Squared => 1.0,
            Loss::Huber { tau } => {
                if (u - v).abs() <= tau {
                    1.0
                } else {
                    0.0
                }
            }
            Loss::Logistic => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
        }
    }

    /// d3M/du3
    pub fn duuu(self, u: f64, _v: f64) -> f64 {
        match self {
            Loss::Squared | Loss::Huber { .. } => 0.0,
            Loss::Logistic => {
                let s = sigmoid(u);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }

    /// d2M/dudv
    pub fn duv(self, u: f64, v: f64) -> f64 {
        match self {
            Loss::Squared => -1.0,
            Loss::Huber { tau } => {
                if (u - v).abs() <= tau {
                    -1.0
                } else {
                    0.0
                }
            }
            Loss::Logistic => -1.0,
        }
    }

    /// d3M/du2dv
    pub fn duuv(self, _u: f64, _v: f64) -> f64 {
        match self {
            Loss::Squared | Loss::Huber { .. } | Loss::Logistic => 0.0,
        }
    }
}

const PROX_TOL: f64 = 1e-12;
const PROX_MAX_ITER: usize = 100;

/// prox_{rho M(., v)}(z) = argmin_t { rho M(t, v) + (t - z)^2 / 2 }.
///
/// rho = 0 returns z. Squared and Huber losses use their closed forms; the
/// logistic prox is found by safeguarded Newton on the stationarity equation,
/// to absolute residual 1e-12.
pub fn prox(loss: Loss, rho: f64, v: f64, z: f64) -> Result<f64> {
    if !rho.is_finite() || !v.is_finite() || !z.is_finite() || rho < 0.0 {
        return Err(Error::Numeric(format!(
            "prox requires finite inputs and rho >= 0 (rho={rho}, v={v}, z={z})"
        )));
    }
    Ok(prox_unchecked(loss, rho, v, z))
}

/// Hot-path prox without input validation; callers guarantee finite inputs
/// and rho >= 0.
#[inline]
pub(crate) fn prox_unchecked(loss: Loss, rho: f64, v: f64, z: f64) -> f64 {
    if rho == 0.0 {
        return z;
    }
    match loss {
        Loss::Squared => (z + rho * v) / (1.0 + rho),
        Loss::Huber { tau } => {
            // stationarity: t + rho clamp(t - v, -tau, tau) = z
            let upper = z - rho * tau; // t - v >= tau branch
            if upper - v >= tau {
                return upper;
            }
            let lower = z + rho * tau; // t - v <= -tau branch
            if lower - v <= -tau {
                return lower;
            }
            (z + rho * v) / (1.0 + rho)
        }
        Loss::Logistic => {
            // M(t, v) = zeta(t) - v t, so t solves t + rho sigmoid(t) = z + rho v
            let c = z + rho * v;
            // sigmoid in (0,1) brackets the root in [c - rho, c]
            let mut lo = c - rho;
            let mut hi = c;
            let mut t = 0.5 * (lo + hi);
            // safeguarded Newton: fall back to bisection whenever the
            // Newton step leaves the bracket or stops halving it, so the
            // bracket shrinks geometrically even on sigmoid plateaus
            let mut step_old = hi - lo;
            let mut step = step_old;
            for _ in 0..PROX_MAX_ITER {
                let f = t + rho * sigmoid(t) - c;
                if f.abs() <= PROX_TOL {
                    return t;
                }
                if f > 0.0 {
                    hi = t;
                } else {
                    lo = t;
                }
                let s = sigmoid(t);
                let fp = 1.0 + rho * s * (1.0 - s);
                let newton_exits = ((t - hi) * fp - f) * ((t - lo) * fp - f) > 0.0;
                if newton_exits || 2.0 * f.abs() > (step_old * fp).abs() {
                    step_old = step;
                    step = 0.5 * (hi - lo);
                    t = lo + step;
                } else {
                    step_old = step;
                    step = f / fp;
                    t -= step;
                }
            }
            t
        }
    }
}

/// d prox / dz = 1 / (1 + rho M''(prox, v)).
pub fn prox_derivative(loss: Loss, rho: f64, v: f64, z: f64) -> Result<f64> {
    let p = prox(loss, rho, v, z)?;
    Ok(1.0 / (1.0 + rho * loss.duu(p, v)))
}

/// d prox / d rho = -M'(prox, v) / (1 + rho M''(prox, v)).
pub fn prox_db(loss: Loss, rho: f64, v: f64, z: f64) -> Result<f64> {
    let p = prox(loss, rho, v, z)?;
    Ok(-loss.du(p, v) / (1.0 + rho * loss.duu(p, v)))
}
