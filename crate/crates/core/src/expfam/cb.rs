//! Scalar continuous Bernoulli on [0, 1] with density ∝ exp(η z).
//!
//! Closed forms are 0/0 at η = 0 and lose precision nearby, so every function
//! switches to a Taylor expansion for |η| < `SERIES_RADIUS`.

use crate::error::{Error, Result};

pub const SERIES_RADIUS: f64 = 0.25;

/// A(η) = log((e^η − 1)/η).
pub fn log_partition(eta: f64) -> f64 {
    if eta.abs() < SERIES_RADIUS {
        let e2 = eta * eta;
        eta / 2.0
            + e2 * (1.0 / 24.0
                + e2 * (-1.0 / 2880.0
                    + e2 * (1.0 / 181_440.0 + e2 * (-1.0 / 9_676_800.0 + e2 / 479_001_600.0))))
    } else if eta > 0.0 {
        eta + (-(-eta).exp_m1()).ln() - eta.ln()
    } else {
        (-eta.exp_m1()).ln() - (-eta).ln()
    }
}

/// E[z] = A'(η).
pub fn mean(eta: f64) -> f64 {
    if eta.abs() < SERIES_RADIUS {
        let e2 = eta * eta;
        0.5 + eta
            * (1.0 / 12.0
                + e2 * (-1.0 / 720.0
                    + e2 * (1.0 / 30_240.0 + e2 * (-1.0 / 1_209_600.0 + e2 / 47_900_160.0))))
    } else {
        -1.0 / (-eta).exp_m1() - 1.0 / eta
    }
}

/// Var[z] = A''(η).
pub fn variance(eta: f64) -> f64 {
    if eta.abs() < SERIES_RADIUS {
        let e2 = eta * eta;
        1.0 / 12.0
            + e2 * (-1.0 / 240.0
                + e2 * (1.0 / 6048.0 + e2 * (-7.0 / 1_209_600.0 + e2 * 9.0 / 47_900_160.0)))
    } else if eta.abs() > 60.0 {
        1.0 / (eta * eta)
    } else {
        let s = (eta / 2.0).sinh();
        1.0 / (eta * eta) - 1.0 / (4.0 * s * s)
    }
}

/// A'''(η), the derivative of the variance.
pub fn third_cumulant(eta: f64) -> f64 {
    if eta.abs() < SERIES_RADIUS {
        let e2 = eta * eta;
        eta * (-1.0 / 120.0
            + e2 * (4.0 / 6048.0 + e2 * (-42.0 / 1_209_600.0 + e2 * 72.0 / 47_900_160.0)))
    } else if eta.abs() > 60.0 {
        -2.0 / (eta * eta * eta)
    } else {
        let h = eta / 2.0;
        let s = h.sinh();
        -2.0 / (eta * eta * eta) + h.cosh() / (4.0 * s * s * s)
    }
}

/// Inverse CDF at u ∈ [0, 1].
pub fn quantile(eta: f64, u: f64) -> f64 {
    let z = if eta.abs() < 1e-12 {
        u
    } else if eta > 0.0 {
        1.0 + (u + (1.0 - u) * (-eta).exp()).ln() / eta
    } else {
        (u * eta.exp_m1()).ln_1p() / eta
    };
    z.clamp(0.0, 1.0)
}

/// Solves mean(η) = target by Newton's method safeguarded with bisection.
pub fn natural_from_mean(target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "continuous Bernoulli mean {target} outside (0, 1)"
        )));
    }
    if target > 0.5 {
        return natural_from_mean(1.0 - target).map(|e| -e);
    }
    if (target - 0.5).abs() < 1e-300 {
        return Ok(0.0);
    }
    // mean(η) < −1/η for η < 0, so the root lies in (−1/t − 1, 0].
    let (mut lo, mut hi) = (-1.0 / target - 1.0, 0.0);
    let mut eta = -1.0 / target + 2.0;
    if !(eta > lo && eta < hi) {
        eta = 0.5 * (lo + hi);
    }
    for _ in 0..100 {
        let f = mean(eta) - target;
        if f.abs() <= 1e-15 * target.max(1e-3) {
            return Ok(eta);
        }
        if f > 0.0 {
            hi = eta;
        } else {
            lo = eta;
        }
        let step = f / variance(eta);
        let mut next = eta - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - eta).abs() <= 1e-14 * (1.0 + eta.abs()) {
            return Ok(next);
        }
        eta = next;
    }
    Err(Error::Numeric(format!(
        "continuous Bernoulli inverse mean did not converge for target {target}"
    )))
}
