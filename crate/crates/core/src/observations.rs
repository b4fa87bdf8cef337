//! Observation models p(y | z) and their expected log-likelihoods under q(z).

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::expfam::special::ln_factorial;
use crate::expfam::{cb, gamma, Family, NaturalParams};
use crate::rng::FilterRng;

/// Poisson rates above this are treated as overflow when sampling.
pub const MAX_POISSON_RATE: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationModel {
    /// y_n ~ Poisson(Δ exp(C_nᵀz + b_n)).
    PoissonExp { c: DMatrix<f64>, b: DVector<f64>, dt: f64 },
    /// y_n ~ N(C_nᵀz + b_n, r_n).
    LinearGaussian { c: DMatrix<f64>, b: DVector<f64>, r: DVector<f64> },
}

/// Partial derivatives of an expected log-likelihood written as f(m, P).
struct MomentGrad {
    value: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl ObservationModel {
    pub fn poisson(c: DMatrix<f64>, b: DVector<f64>, dt: f64) -> Result<Self> {
        let m = ObservationModel::PoissonExp { c, b, dt };
        m.validate()?;
        Ok(m)
    }

    pub fn gaussian(c: DMatrix<f64>, b: DVector<f64>, r: DVector<f64>) -> Result<Self> {
        let m = ObservationModel::LinearGaussian { c, b, r };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, b) = self.loading();
        if b.len() != c.nrows() {
            return Err(Error::ShapeMismatch("offset length must equal the number of outputs".into()));
        }
        if c.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("loading and offset must be finite".into()));
        }
        match self {
            ObservationModel::PoissonExp { dt, .. } => {
                if !(*dt > 0.0 && dt.is_finite()) {
                    return Err(Error::InvalidParameter("Poisson bin width must be positive".into()));
                }
            }
            ObservationModel::LinearGaussian { r, c, .. } => {
                if r.len() != c.nrows() {
                    return Err(Error::ShapeMismatch("noise variances must match outputs".into()));
                }
                if r.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::InvalidParameter("observation variances must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn loading(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        match self {
            ObservationModel::PoissonExp { c, b, .. } | ObservationModel::LinearGaussian { c, b, .. } => {
                (c, b)
            }
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.loading().0.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.loading().0.ncols()
    }

    fn check_shapes(&self, family: Family, y: &DVector<f64>) -> Result<()> {
        if family.dim() != self.latent_dim() {
            return Err(Error::ShapeMismatch(format!(
                "observation model expects L = {}, got {family}",
                self.latent_dim()
            )));
        }
        if y.len() != self.obs_dim() {
            return Err(Error::ShapeMismatch(format!(
                "observation has length {}, expected {}",
                y.len(),
                self.obs_dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite observation".into()));
        }
        if matches!(self, ObservationModel::PoissonExp { .. })
            && y.iter().any(|&v| v < 0.0 || v.fract() != 0.0)
        {
            return Err(Error::Support("Poisson counts must be non-negative integers".into()));
        }
        Ok(())
    }

    /// log p(y | z).
    pub fn log_likelihood(&self, z: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        if z.len() != self.latent_dim() || y.len() != self.obs_dim() {
            return Err(Error::ShapeMismatch("state or observation has the wrong length".into()));
        }
        let (c, b) = self.loading();
        let eta = c * z + b;
        Ok(match self {
            ObservationModel::PoissonExp { dt, .. } => (0..y.len())
                .map(|n| y[n] * (eta[n] + dt.ln()) - dt * eta[n].exp() - ln_factorial(y[n]))
                .sum(),
            ObservationModel::LinearGaussian { r, .. } => (0..y.len())
                .map(|n| -0.5 * (2.0 * PI * r[n]).ln() - 0.5 * (y[n] - eta[n]).powi(2) / r[n])
                .sum(),
        })
    }

    /// Conditional mean and variance of y given z, per output.
    pub fn conditional_moments(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if z.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch("state has the wrong length".into()));
        }
        let (c, b) = self.loading();
        let eta = c * z + b;
        Ok(match self {
            ObservationModel::PoissonExp { dt, .. } => {
                let rate = eta.map(|e| dt * e.exp());
                (rate.clone(), rate)
            }
            ObservationModel::LinearGaussian { r, .. } => (eta, r.clone()),
        })
    }

    pub fn sample_obs(&self, z: &DVector<f64>, rng: &mut FilterRng) -> Result<DVector<f64>> {
        let (mean, var) = self.conditional_moments(z)?;
        match self {
            ObservationModel::PoissonExp { .. } => {
                let mut y = DVector::zeros(mean.len());
                for (n, &rate) in mean.iter().enumerate() {
                    if !(rate.is_finite() && rate <= MAX_POISSON_RATE) {
                        return Err(Error::Numeric(format!("Poisson rate {rate} overflowed for output {n}")));
                    }
                    y[n] = if rate > 0.0 {
                        Poisson::new(rate).map_err(|e| Error::Numeric(e.to_string()))?.sample(rng)
                    } else {
                        0.0
                    };
                }
                Ok(y)
            }
            ObservationModel::LinearGaussian { .. } => Ok(DVector::from_fn(mean.len(), |n, _| {
                let e: f64 = StandardNormal.sample(rng);
                mean[n] + var[n].sqrt() * e
            })),
        }
    }

    /// f(m, P) and its partials for q Gaussian with mean m and covariance P.
    fn gaussian_moment_terms(&self, m: &DVector<f64>, p: &DMatrix<f64>, y: &DVector<f64>) -> MomentGrad {
        let (c, b) = self.loading();
        let l = m.len();
        let mut value = 0.0;
        let mut g_mean = DVector::zeros(l);
        let mut g_cov = DMatrix::zeros(l, l);
        for n in 0..c.nrows() {
            let cn = c.row(n).transpose();
            let lin = cn.dot(m) + b[n];
            let quad = (p * &cn).dot(&cn);
            match self {
                ObservationModel::PoissonExp { dt, .. } => {
                    let rho = dt * (lin + 0.5 * quad).exp();
                    value += y[n] * (lin + dt.ln()) - rho - ln_factorial(y[n]);
                    g_mean += &cn * (y[n] - rho);
                    g_cov -= &cn * cn.transpose() * (0.5 * rho);
                }
                ObservationModel::LinearGaussian { r, .. } => {
                    let resid = y[n] - lin;
                    value += -0.5 * (2.0 * PI * r[n]).ln() - 0.5 * (resid * resid + quad) / r[n];
                    g_mean += &cn * (resid / r[n]);
                    g_cov -= &cn * cn.transpose() * (0.5 / r[n]);
                }
            }
        }
        MomentGrad { value, mean: g_mean, cov: g_cov }
    }

    /// E_q[log p(y | z)] and its gradient with respect to the mean parameters of q.
    pub fn expected_loglik_and_grad(&self, q: &NaturalParams, y: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let family = q.family();
        self.check_shapes(family, y)?;
        let l = family.dim();
        match family {
            Family::GaussianDense(_) => {
                let (m, p) = q.gaussian_moments()?;
                let g = self.gaussian_moment_terms(&m, &p, y);
                // μ = (m, S) with P = S − mmᵀ
                let mut grad = DVector::zeros(l + l * l);
                grad.rows_mut(0, l).copy_from(&(&g.mean - &g.cov * &m * 2.0));
                grad.rows_mut(l, l * l).copy_from_slice(g.cov.as_slice());
                Ok((g.value, grad))
            }
            Family::GaussianDiag(_) => {
                let (m, p) = q.gaussian_moments()?;
                let g = self.gaussian_moment_terms(&m, &p, y);
                let mut grad = DVector::zeros(2 * l);
                for i in 0..l {
                    grad[i] = g.mean[i] - 2.0 * g.cov[(i, i)] * m[i];
                    grad[l + i] = g.cov[(i, i)];
                }
                Ok((g.value, grad))
            }
            Family::ContinuousBernoulli(_) => self.cb_terms(q.lambda(), y),
            Family::Gamma(_) => self.gamma_terms(q, y),
        }
    }

    pub fn expected_loglik(&self, q: &NaturalParams, y: &DVector<f64>) -> Result<f64> {
        Ok(self.expected_loglik_and_grad(q, y)?.0)
    }

    pub fn grad_expected_loglik_mean_params(&self, q: &NaturalParams, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.expected_loglik_and_grad(q, y)?.1)
    }

    /// Factorized CB posterior: natural gradient through the diagonal Fisher A''(η).
    fn cb_terms(&self, eta: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (c, b) = self.loading();
        let l = eta.len();
        let mean = eta.map(cb::mean);
        let var = eta.map(cb::variance);
        let mut value = 0.0;
        let mut g_eta = DVector::<f64>::zeros(l);
        match self {
            ObservationModel::PoissonExp { dt, .. } => {
                for n in 0..c.nrows() {
                    let lin = c.row(n).transpose().dot(&mean) + b[n];
                    let log_mgf: f64 = (0..l)
                        .map(|i| cb::log_partition(eta[i] + c[(n, i)]) - cb::log_partition(eta[i]))
                        .sum();
                    let rho = dt * (b[n] + log_mgf).exp();
                    value += y[n] * (lin + dt.ln()) - rho - ln_factorial(y[n]);
                    for i in 0..l {
                        g_eta[i] += y[n] * c[(n, i)] * var[i]
                            - rho * (cb::mean(eta[i] + c[(n, i)]) - mean[i]);
                    }
                }
            }
            ObservationModel::LinearGaussian { r, .. } => {
                let third = eta.map(cb::third_cumulant);
                for n in 0..c.nrows() {
                    let cn = c.row(n).transpose();
                    let resid = y[n] - cn.dot(&mean) - b[n];
                    let spread: f64 = (0..l).map(|i| cn[i] * cn[i] * var[i]).sum();
                    value += -0.5 * (2.0 * PI * r[n]).ln() - 0.5 * (resid * resid + spread) / r[n];
                    for i in 0..l {
                        let d_mean = cn[i] * resid / r[n];
                        let d_var = -0.5 * cn[i] * cn[i] / r[n];
                        g_eta[i] += d_mean * var[i] + d_var * third[i];
                    }
                }
            }
        }
        let grad = DVector::from_fn(l, |i, _| g_eta[i] / var[i]);
        Ok((value, grad))
    }

    /// Factorized Gamma posterior; the Poisson case requires β_l > C_nl.
    fn gamma_terms(&self, q: &NaturalParams, y: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (c, b) = self.loading();
        let (shape, rate) = q.gamma_shape_rate()?;
        let l = shape.len();
        let mean = shape.component_div(&rate);
        let mut value = 0.0;
        // derivatives with respect to (α, β)
        let mut d_shape = DVector::<f64>::zeros(l);
        let mut d_rate = DVector::<f64>::zeros(l);
        match self {
            ObservationModel::PoissonExp { dt, .. } => {
                for n in 0..c.nrows() {
                    for i in 0..l {
                        if rate[i] <= c[(n, i)] {
                            return Err(Error::Domain(format!(
                                "moment generating function undefined: rate {} ≤ loading {} at (n={n}, l={i})",
                                rate[i],
                                c[(n, i)]
                            )));
                        }
                    }
                    let lin = c.row(n).transpose().dot(&mean) + b[n];
                    let log_mgf: f64 =
                        (0..l).map(|i| -shape[i] * (1.0 - c[(n, i)] / rate[i]).ln()).sum();
                    let rho = dt * (b[n] + log_mgf).exp();
                    value += y[n] * (lin + dt.ln()) - rho - ln_factorial(y[n]);
                    for i in 0..l {
                        let cni = c[(n, i)];
                        d_shape[i] += y[n] * cni / rate[i] + rho * (1.0 - cni / rate[i]).ln();
                        d_rate[i] += -y[n] * cni * shape[i] / (rate[i] * rate[i])
                            + rho * shape[i] * cni / (rate[i] * (rate[i] - cni));
                    }
                }
            }
            ObservationModel::LinearGaussian { r, .. } => {
                let var = DVector::from_fn(l, |i, _| shape[i] / (rate[i] * rate[i]));
                for n in 0..c.nrows() {
                    let cn = c.row(n).transpose();
                    let resid = y[n] - cn.dot(&mean) - b[n];
                    let spread: f64 = (0..l).map(|i| cn[i] * cn[i] * var[i]).sum();
                    value += -0.5 * (2.0 * PI * r[n]).ln() - 0.5 * (resid * resid + spread) / r[n];
                    for i in 0..l {
                        let d_mean = cn[i] * resid / r[n];
                        let d_var = -0.5 * cn[i] * cn[i] / r[n];
                        let (a, bb) = (shape[i], rate[i]);
                        d_shape[i] += d_mean / bb + d_var / (bb * bb);
                        d_rate[i] += -d_mean * a / (bb * bb) - 2.0 * d_var * a / (bb * bb * bb);
                    }
                }
            }
        }
        let mut grad = DVector::zeros(2 * l);
        for i in 0..l {
            // λ = (α − 1, −β)
            let (g1, g2) = (d_shape[i], -d_rate[i]);
            let (f11, f12, f22) = gamma::fisher(shape[i], rate[i]);
            let det = f11 * f22 - f12 * f12;
            if !(det > 0.0) {
                return Err(Error::Numeric("singular Gamma Fisher information".into()));
            }
            grad[i] = (f22 * g1 - f12 * g2) / det;
            grad[l + i] = (f11 * g2 - f12 * g1) / det;
        }
        Ok((value, grad))
    }
}
