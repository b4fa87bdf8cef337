//! Scalar Gamma(shape α, rate β) with t(z) = (log z, z) and λ = (α − 1, −β).

use super::special::{digamma, ln_gamma, trigamma};
use crate::error::{Error, Result};

/// Margin kept between natural parameters and the boundary of the domain.
pub const DOMAIN_MARGIN: f64 = 1e-8;

pub fn check(shape_entry: f64, rate_entry: f64) -> Result<()> {
    if !(shape_entry > -1.0 + DOMAIN_MARGIN) || !(rate_entry < -DOMAIN_MARGIN) {
        return Err(Error::InvalidParameter(format!(
            "gamma natural parameters ({shape_entry}, {rate_entry}) outside domain"
        )));
    }
    Ok(())
}

pub fn shape_rate(shape_entry: f64, rate_entry: f64) -> (f64, f64) {
    (shape_entry + 1.0, -rate_entry)
}

pub fn log_partition(shape: f64, rate: f64) -> f64 {
    ln_gamma(shape) - shape * rate.ln()
}

/// (E[log z], E[z]).
pub fn mean(shape: f64, rate: f64) -> (f64, f64) {
    (digamma(shape) - rate.ln(), shape / rate)
}

/// Hessian of A in natural coordinates, entries (11, 12, 22).
pub fn fisher(shape: f64, rate: f64) -> (f64, f64, f64) {
    (trigamma(shape), 1.0 / rate, shape / (rate * rate))
}

/// Recovers (shape, rate) from (E[log z], E[z]).
pub fn shape_rate_from_mean(mean_log: f64, mean: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0) || !mean_log.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gamma mean parameters ({mean_log}, {mean}) not interior"
        )));
    }
    // ψ(α) − log α = c with c < 0 by Jensen.
    let c = mean_log - mean.ln();
    if !(c < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma mean parameters violate E[log z] < log E[z] ({mean_log}, {mean})"
        )));
    }
    let s = -c;
    let mut alpha = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    let g = |a: f64| digamma(a) - a.ln() - c;
    let (mut lo, mut hi) = (alpha, alpha);
    while g(lo) > 0.0 {
        lo *= 0.5;
    }
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let f = g(alpha);
        if f.abs() <= 1e-14 * (1.0 + c.abs()) {
            return Ok((alpha, alpha / mean));
        }
        if f > 0.0 {
            hi = alpha;
        } else {
            lo = alpha;
        }
        let slope = trigamma(alpha) - 1.0 / alpha;
        let mut next = alpha - f / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - alpha).abs() <= 1e-15 * alpha {
            return Ok((next, next / mean));
        }
        alpha = next;
    }
    Err(Error::Numeric(format!(
        "gamma inverse mean did not converge for ({mean_log}, {mean})"
    )))
}
