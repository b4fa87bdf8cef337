//! Minimal exponential families with constant base measure.
//!
//! All families use h(z) = 1, so any Gaussian normalizer lives in A(λ).
//! Flat layouts of the natural parameter vector:
//!
//! | family | layout | D |
//! |--------|--------|---|
//! | `GaussianDense(L)` | `[P⁻¹m; vec(−½P⁻¹)]` (column-major, symmetric) | L + L² |
//! | `GaussianDiag(L)` | `[m/v; −1/(2v)]` | 2L |
//! | `ContinuousBernoulli(L)` | `[η]` | L |
//! | `Gamma(L)` | `[α − 1; −β]` | 2L |

pub mod cb;
pub mod gamma;
pub mod gaussian;
pub mod special;

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::FilterRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", content = "dim", rename_all = "snake_case")]
pub enum Family {
    GaussianDense(usize),
    GaussianDiag(usize),
    ContinuousBernoulli(usize),
    Gamma(usize),
}

impl Family {
    /// Latent dimension L.
    pub fn dim(&self) -> usize {
        match *self {
            Family::GaussianDense(l)
            | Family::GaussianDiag(l)
            | Family::ContinuousBernoulli(l)
            | Family::Gamma(l) => l,
        }
    }

    /// Length D of the natural/mean parameter vectors.
    pub fn stat_dim(&self) -> usize {
        let l = self.dim();
        match self {
            Family::GaussianDense(_) => l + l * l,
            Family::GaussianDiag(_) | Family::Gamma(_) => 2 * l,
            Family::ContinuousBernoulli(_) => l,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Family::GaussianDense(_) | Family::GaussianDiag(_))
    }

    /// Whether `z` lies in the support.
    pub fn in_support(&self, z: &DVector<f64>) -> bool {
        z.len() == self.dim()
            && match self {
                Family::GaussianDense(_) | Family::GaussianDiag(_) => z.iter().all(|v| v.is_finite()),
                Family::ContinuousBernoulli(_) => z.iter().all(|&v| (0.0..=1.0).contains(&v)),
                Family::Gamma(_) => z.iter().all(|&v| v > 0.0 && v.is_finite()),
            }
    }

    /// Sufficient statistic t(z).
    pub fn sufficient_statistic(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.dim();
        match self {
            Family::GaussianDense(_) => {
                let mut t = DVector::zeros(l + l * l);
                t.rows_mut(0, l).copy_from(z);
                let outer = z * z.transpose();
                t.rows_mut(l, l * l).copy_from_slice(outer.as_slice());
                t
            }
            Family::GaussianDiag(_) => {
                DVector::from_iterator(2 * l, z.iter().copied().chain(z.iter().map(|v| v * v)))
            }
            Family::ContinuousBernoulli(_) => z.clone(),
            Family::Gamma(_) => {
                DVector::from_iterator(2 * l, z.iter().map(|v| v.ln()).chain(z.iter().copied()))
            }
        }
    }

    /// The initial filter state used when none is supplied.
    pub fn default_prior(&self) -> NaturalParams {
        let l = self.dim();
        match self {
            Family::GaussianDense(_) => {
                NaturalParams::gaussian(&DVector::zeros(l), &DMatrix::identity(l, l)).unwrap()
            }
            Family::GaussianDiag(_) => {
                NaturalParams::gaussian_diag(&DVector::zeros(l), &DVector::from_element(l, 1.0))
                    .unwrap()
            }
            Family::ContinuousBernoulli(_) => {
                NaturalParams::continuous_bernoulli(&DVector::zeros(l)).unwrap()
            }
            Family::Gamma(_) => NaturalParams::gamma(
                &DVector::from_element(l, 2.0),
                &DVector::from_element(l, 2.0),
            )
            .unwrap(),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::GaussianDense(l) => write!(f, "gaussian_dense({l})"),
            Family::GaussianDiag(l) => write!(f, "gaussian_diag({l})"),
            Family::ContinuousBernoulli(l) => write!(f, "continuous_bernoulli({l})"),
            Family::Gamma(l) => write!(f, "gamma({l})"),
        }
    }
}

pub(crate) fn ensure_same(expected: Family, got: Family) -> Result<()> {
    if expected != got {
        return Err(Error::FamilyMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        });
    }
    Ok(())
}

/// Natural parameters λ of a member of `family`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    family: Family,
    lambda: DVector<f64>,
}

/// Mean parameters μ = E[t(z)].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanParams {
    family: Family,
    mu: DVector<f64>,
}

impl NaturalParams {
    /// Validated constructor. Dense Gaussian second-moment blocks are symmetrized.
    pub fn new(family: Family, mut lambda: DVector<f64>) -> Result<Self> {
        if lambda.len() != family.stat_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{family} expects {} natural parameters, got {}",
                family.stat_dim(),
                lambda.len()
            )));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite natural parameter".into()));
        }
        if let Family::GaussianDense(l) = family {
            let block = DMatrix::from_column_slice(l, l, &lambda.as_slice()[l..]);
            let sym = gaussian::symmetrize(&block);
            lambda.rows_mut(l, l * l).copy_from_slice(sym.as_slice());
        }
        let p = Self { family, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let l = mean.len();
        if cov.shape() != (l, l) {
            return Err(Error::ShapeMismatch("covariance must be L×L".into()));
        }
        let (eta1, lam2) = gaussian::encode(mean, cov)?;
        let mut lambda = DVector::zeros(l + l * l);
        lambda.rows_mut(0, l).copy_from(&eta1);
        lambda.rows_mut(l, l * l).copy_from_slice(lam2.as_slice());
        Self::new(Family::GaussianDense(l), lambda)
    }

    pub fn gaussian_diag(mean: &DVector<f64>, var: &DVector<f64>) -> Result<Self> {
        let l = mean.len();
        if var.len() != l || var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("variances must be positive".into()));
        }
        let lambda = DVector::from_iterator(
            2 * l,
            mean.iter()
                .zip(var.iter())
                .map(|(m, v)| m / v)
                .chain(var.iter().map(|v| -0.5 / v)),
        );
        Self::new(Family::GaussianDiag(l), lambda)
    }

    pub fn continuous_bernoulli(eta: &DVector<f64>) -> Result<Self> {
        Self::new(Family::ContinuousBernoulli(eta.len()), eta.clone())
    }

    pub fn gamma(shape: &DVector<f64>, rate: &DVector<f64>) -> Result<Self> {
        let l = shape.len();
        if rate.len() != l {
            return Err(Error::ShapeMismatch("shape and rate lengths differ".into()));
        }
        let lambda = DVector::from_iterator(
            2 * l,
            shape.iter().map(|a| a - 1.0).chain(rate.iter().map(|b| -b)),
        );
        Self::new(Family::Gamma(l), lambda)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn into_lambda(self) -> DVector<f64> {
        self.lambda
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.family.dim();
        if l == 0 {
            return Err(Error::InvalidParameter("latent dimension must be ≥ 1".into()));
        }
        match self.family {
            Family::GaussianDense(_) => {
                let (eta1, lam2) = self.dense_blocks();
                gaussian::decode(&eta1, &lam2).map(|_| ())
            }
            Family::GaussianDiag(_) => {
                if self.lambda.rows(l, l).iter().all(|&v| v < 0.0) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(
                        "diagonal gaussian second natural parameters must be negative".into(),
                    ))
                }
            }
            Family::ContinuousBernoulli(_) => Ok(()),
            Family::Gamma(_) => {
                (0..l).try_for_each(|i| gamma::check(self.lambda[i], self.lambda[l + i]))
            }
        }
    }

    fn dense_blocks(&self) -> (DVector<f64>, DMatrix<f64>) {
        let l = self.family.dim();
        let eta1 = DVector::from_column_slice(&self.lambda.as_slice()[..l]);
        let lam2 = DMatrix::from_column_slice(l, l, &self.lambda.as_slice()[l..]);
        (eta1, lam2)
    }

    /// Shape and rate vectors of a Gamma family member.
    pub fn gamma_shape_rate(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        ensure_same(Family::Gamma(self.family.dim()), self.family)?;
        let l = self.family.dim();
        let shape = DVector::from_iterator(l, (0..l).map(|i| self.lambda[i] + 1.0));
        let rate = DVector::from_iterator(l, (0..l).map(|i| -self.lambda[l + i]));
        Ok((shape, rate))
    }

    /// Mean and covariance for the Gaussian families.
    pub fn gaussian_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let l = self.family.dim();
        match self.family {
            Family::GaussianDense(_) => {
                let (eta1, lam2) = self.dense_blocks();
                let d = gaussian::decode(&eta1, &lam2)?;
                Ok((d.mean, d.cov))
            }
            Family::GaussianDiag(_) => {
                let var = DVector::from_iterator(l, (0..l).map(|i| -0.5 / self.lambda[l + i]));
                let mean = DVector::from_iterator(l, (0..l).map(|i| self.lambda[i] * var[i]));
                Ok((mean, DMatrix::from_diagonal(&var)))
            }
            _ => Err(Error::FamilyMismatch {
                expected: "a gaussian family".into(),
                got: self.family.to_string(),
            }),
        }
    }

    /// E[z].
    pub fn state_mean(&self) -> Result<DVector<f64>> {
        let l = self.family.dim();
        match self.family {
            Family::GaussianDense(_) | Family::GaussianDiag(_) => Ok(self.gaussian_moments()?.0),
            Family::ContinuousBernoulli(_) => Ok(self.lambda.map(cb::mean)),
            Family::Gamma(_) => {
                Ok(DVector::from_iterator(l, (0..l).map(|i| (self.lambda[i] + 1.0) / -self.lambda[l + i])))
            }
        }
    }

    /// Cov[z]; diagonal for factorized families.
    pub fn state_covariance(&self) -> Result<DMatrix<f64>> {
        let l = self.family.dim();
        match self.family {
            Family::GaussianDense(_) | Family::GaussianDiag(_) => Ok(self.gaussian_moments()?.1),
            Family::ContinuousBernoulli(_) => Ok(DMatrix::from_diagonal(&self.lambda.map(cb::variance))),
            Family::Gamma(_) => Ok(DMatrix::from_diagonal(&DVector::from_iterator(
                l,
                (0..l).map(|i| {
                    let (a, b) = gamma::shape_rate(self.lambda[i], self.lambda[l + i]);
                    a / (b * b)
                }),
            ))),
        }
    }

    /// Log-partition A(λ).
    pub fn log_partition(&self) -> Result<f64> {
        let l = self.family.dim();
        match self.family {
            Family::GaussianDense(_) => {
                let (eta1, lam2) = self.dense_blocks();
                let d = gaussian::decode(&eta1, &lam2)?;
                Ok(0.5 * eta1.dot(&d.mean) - 0.5 * gaussian::log_det(&d.prec_chol)
                    + 0.5 * l as f64 * (2.0 * PI).ln())
            }
            Family::GaussianDiag(_) => {
                self.validate()?;
                Ok((0..l)
                    .map(|i| {
                        let (e1, e2) = (self.lambda[i], self.lambda[l + i]);
                        -e1 * e1 / (4.0 * e2) - 0.5 * (-2.0 * e2).ln() + 0.5 * (2.0 * PI).ln()
                    })
                    .sum())
            }
            Family::ContinuousBernoulli(_) => Ok(self.lambda.iter().map(|&e| cb::log_partition(e)).sum()),
            Family::Gamma(_) => {
                self.validate()?;
                Ok((0..l)
                    .map(|i| {
                        let (a, b) = gamma::shape_rate(self.lambda[i], self.lambda[l + i]);
                        gamma::log_partition(a, b)
                    })
                    .sum())
            }
        }
    }

    /// μ = ∇A(λ).
    pub fn to_mean(&self) -> Result<MeanParams> {
        let l = self.family.dim();
        let mu = match self.family {
            Family::GaussianDense(_) => {
                let (eta1, lam2) = self.dense_blocks();
                let d = gaussian::decode(&eta1, &lam2)?;
                let second = &d.cov + &d.mean * d.mean.transpose();
                let mut mu = DVector::zeros(l + l * l);
                mu.rows_mut(0, l).copy_from(&d.mean);
                mu.rows_mut(l, l * l).copy_from_slice(second.as_slice());
                mu
            }
            Family::GaussianDiag(_) => {
                let (mean, cov) = self.gaussian_moments()?;
                DVector::from_iterator(
                    2 * l,
                    mean.iter()
                        .copied()
                        .chain((0..l).map(|i| cov[(i, i)] + mean[i] * mean[i])),
                )
            }
            Family::ContinuousBernoulli(_) => self.lambda.map(cb::mean),
            Family::Gamma(_) => {
                self.validate()?;
                let mut mu = DVector::zeros(2 * l);
                for i in 0..l {
                    let (a, b) = gamma::shape_rate(self.lambda[i], self.lambda[l + i]);
                    let (ml, m) = gamma::mean(a, b);
                    mu[i] = ml;
                    mu[l + i] = m;
                }
                mu
            }
        };
        Ok(MeanParams { family: self.family, mu })
    }

    /// Entropy H = A(λ) − λᵀμ (base measure h = 1).
    pub fn entropy(&self) -> Result<f64> {
        let l = self.family.dim();
        match self.family {
            Family::GaussianDense(_) | Family::GaussianDiag(_) => {
                let (_, cov) = self.gaussian_moments()?;
                let chol = gaussian::cholesky(&cov)
                    .ok_or_else(|| Error::Numeric("covariance factorization failed".into()))?;
                Ok(0.5 * (l as f64 * (1.0 + (2.0 * PI).ln()) + gaussian::log_det(&chol)))
            }
            _ => {
                let mu = self.to_mean()?;
                Ok(self.log_partition()? - self.lambda.dot(&mu.mu))
            }
        }
    }

    /// KL(self ‖ other) = (λ_p − λ_q)ᵀμ_p − A(λ_p) + A(λ_q).
    pub fn kl(&self, other: &NaturalParams) -> Result<f64> {
        ensure_same(self.family, other.family)?;
        if self.lambda == other.lambda {
            return Ok(0.0);
        }
        let mu = self.to_mean()?;
        let kl = (&self.lambda - &other.lambda).dot(&mu.mu) - self.log_partition()?
            + other.log_partition()?;
        Ok(kl.max(0.0))
    }

    /// log p(z) = λᵀt(z) − A(λ); −∞ outside the support.
    pub fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.family.dim() {
            return Err(Error::ShapeMismatch(format!(
                "point has length {}, family {}",
                z.len(),
                self.family
            )));
        }
        if !self.family.in_support(z) {
            return Ok(f64::NEG_INFINITY);
        }
        match self.family {
            Family::GaussianDense(_) => {
                let (eta1, lam2) = self.dense_blocks();
                let d = gaussian::decode(&eta1, &lam2)?;
                let diff = z - &d.mean;
                let w = d.prec_chol.l().transpose() * &diff;
                Ok(-0.5 * w.norm_squared() + 0.5 * gaussian::log_det(&d.prec_chol)
                    - 0.5 * self.family.dim() as f64 * (2.0 * PI).ln())
            }
            _ => Ok(self.lambda.dot(&self.family.sufficient_statistic(z)) - self.log_partition()?),
        }
    }

    /// `n` i.i.d. draws as rows of an n×L matrix.
    pub fn sample(&self, n: usize, rng: &mut FilterRng) -> Result<DMatrix<f64>> {
        let l = self.family.dim();
        let mut out = DMatrix::zeros(n, l);
        match self.family {
            Family::GaussianDense(_) | Family::GaussianDiag(_) => {
                let (mean, cov) = self.gaussian_moments()?;
                let chol = gaussian::cholesky(&cov)
                    .ok_or_else(|| Error::Numeric("covariance factorization failed".into()))?;
                let lower = chol.l();
                for r in 0..n {
                    let eps = DVector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let z = &mean + &lower * eps;
                    out.row_mut(r).copy_from(&z.transpose());
                }
            }
            Family::ContinuousBernoulli(_) => {
                for r in 0..n {
                    for i in 0..l {
                        out[(r, i)] = cb::quantile(self.lambda[i], rng.random::<f64>());
                    }
                }
            }
            Family::Gamma(_) => {
                self.validate()?;
                let dists = (0..l)
                    .map(|i| {
                        let (a, b) = gamma::shape_rate(self.lambda[i], self.lambda[l + i]);
                        rand_distr::Gamma::new(a, 1.0 / b)
                            .map_err(|e| Error::InvalidParameter(e.to_string()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for r in 0..n {
                    for (i, d) in dists.iter().enumerate() {
                        out[(r, i)] = d.sample(rng).max(f64::MIN_POSITIVE);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl MeanParams {
    pub fn new(family: Family, mu: DVector<f64>) -> Result<Self> {
        if mu.len() != family.stat_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{family} expects {} mean parameters, got {}",
                family.stat_dim(),
                mu.len()
            )));
        }
        Ok(Self { family, mu })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// λ = (∇A)⁻¹(μ): closed form for Gaussians, safeguarded Newton otherwise.
    pub fn to_natural(&self) -> Result<NaturalParams> {
        let l = self.family.dim();
        let mu = &self.mu;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite mean parameter".into()));
        }
        match self.family {
            Family::GaussianDense(_) => {
                let mean = DVector::from_column_slice(&mu.as_slice()[..l]);
                let second = DMatrix::from_column_slice(l, l, &mu.as_slice()[l..]);
                let cov = gaussian::symmetrize(&(second - &mean * mean.transpose()));
                NaturalParams::gaussian(&mean, &cov)
            }
            Family::GaussianDiag(_) => {
                let mean = DVector::from_column_slice(&mu.as_slice()[..l]);
                let var = DVector::from_iterator(l, (0..l).map(|i| mu[l + i] - mean[i] * mean[i]));
                NaturalParams::gaussian_diag(&mean, &var)
            }
            Family::ContinuousBernoulli(_) => {
                let eta = mu.iter().map(|&m| cb::natural_from_mean(m)).collect::<Result<Vec<_>>>()?;
                NaturalParams::continuous_bernoulli(&DVector::from_vec(eta))
            }
            Family::Gamma(_) => {
                let mut shape = DVector::zeros(l);
                let mut rate = DVector::zeros(l);
                for i in 0..l {
                    let (a, b) = gamma::shape_rate_from_mean(mu[i], mu[l + i])?;
                    shape[i] = a;
                    rate[i] = b;
                }
                NaturalParams::gamma(&shape, &rate)
            }
        }
    }
}
