//! Multivariate Gaussian helpers: t(z) = (z, zzᵀ), λ = (P⁻¹m, −½P⁻¹).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const JITTER: f64 = 1e-8;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix, retrying once with diagonal jitter.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Some(c);
    }
    let n = sym.nrows();
    let scale = (sym.trace() / n as f64).abs().max(1.0);
    Cholesky::new(sym + DMatrix::identity(n, n) * (JITTER * scale))
}

/// Strict positive definiteness test (no jitter).
pub fn strict_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of an SPD matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = cholesky(m)
        .ok_or_else(|| Error::InvalidParameter("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Mean, covariance and precision Cholesky factor decoded from natural blocks.
pub struct Decoded {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub prec_chol: Cholesky<f64, Dyn>,
}

pub fn decode(eta1: &DVector<f64>, lam2: &DMatrix<f64>) -> Result<Decoded> {
    let prec = symmetrize(lam2) * -2.0;
    let prec_chol = strict_cholesky(&prec).ok_or_else(|| {
        Error::InvalidParameter("gaussian precision block is not negative definite".into())
    })?;
    let mean = prec_chol.solve(eta1);
    let cov = symmetrize(&prec_chol.inverse());
    Ok(Decoded {
        mean,
        cov,
        prec_chol,
    })
}

/// Natural blocks (P⁻¹m, −½P⁻¹) from mean and covariance.
pub fn encode(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = strict_cholesky(cov)
        .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?;
    let prec = symmetrize(&chol.inverse());
    let eta1 = &prec * mean;
    Ok((eta1, prec * -0.5))
}
