//! Reference filters: exact Kalman, bootstrap particle filter and stochastic ensemble Kalman filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::expfam::{gaussian, NaturalParams};
use crate::observations::ObservationModel;
use crate::rng::FilterRng;

/// ESS fraction below which the particle filter resamples.
pub const DEFAULT_RESAMPLE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Linear-Gaussian state space model used by the Kalman filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub b: DVector<f64>,
    pub r: DMatrix<f64>,
}

impl LinearSystem {
    pub fn validate(&self) -> Result<()> {
        let l = self.a.nrows();
        let n = self.c.nrows();
        if self.a.ncols() != l || self.q.shape() != (l, l) || self.c.ncols() != l {
            return Err(Error::ShapeMismatch("inconsistent state dimensions".into()));
        }
        if self.b.len() != n || self.r.shape() != (n, n) {
            return Err(Error::ShapeMismatch("inconsistent observation dimensions".into()));
        }
        if gaussian::strict_cholesky(&self.q).is_none() || gaussian::strict_cholesky(&self.r).is_none() {
            return Err(Error::InvalidParameter("Q and R must be symmetric positive definite".into()));
        }
        Ok(())
    }

    /// Kalman filter view of the linear-Gaussian dynamics and observation models.
    pub fn from_models(dynamics: &DynamicsModel, obs: &ObservationModel) -> Result<Self> {
        let (DynamicsModel::LinearGaussian { a, noise, .. }, ObservationModel::LinearGaussian { c, b, r }) =
            (dynamics, obs)
        else {
            return Err(Error::InvalidParameter(
                "the Kalman filter needs linear-Gaussian dynamics and observations".into(),
            ));
        };
        let sys = Self { a: a.clone(), q: noise.q.clone(), c: c.clone(), b: b.clone(), r: DMatrix::from_diagonal(r) };
        sys.validate()?;
        Ok(sys)
    }
}

pub fn kalman_predict(belief: &GaussianBelief, a: &DMatrix<f64>, q: &DMatrix<f64>) -> GaussianBelief {
    GaussianBelief {
        mean: a * &belief.mean,
        cov: gaussian::symmetrize(&(a * &belief.cov * a.transpose() + q)),
    }
}

/// Measurement update in Joseph form.
pub fn kalman_update(
    prior: &GaussianBelief,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let l = prior.mean.len();
    let s = gaussian::symmetrize(&(c * &prior.cov * c.transpose() + r));
    let chol = gaussian::strict_cholesky(&s)
        .ok_or_else(|| Error::Numeric("innovation covariance is singular".into()))?;
    let gain = chol.solve(&(c * &prior.cov)).transpose();
    let innovation = y - c * &prior.mean - b;
    let ikc = DMatrix::identity(l, l) - &gain * c;
    let cov = &ikc * &prior.cov * ikc.transpose() + &gain * r * gain.transpose();
    Ok(GaussianBelief { mean: &prior.mean + &gain * innovation, cov: gaussian::symmetrize(&cov) })
}

pub fn kalman_step(belief: &GaussianBelief, sys: &LinearSystem, y: &DVector<f64>) -> Result<GaussianBelief> {
    kalman_update(&kalman_predict(belief, &sys.a, &sys.q), &sys.c, &sys.b, &sys.r, y)
}

/// Filtering beliefs for every row of `ys`.
pub fn kalman_filter(sys: &LinearSystem, initial: &GaussianBelief, ys: &DMatrix<f64>) -> Result<Vec<GaussianBelief>> {
    sys.validate()?;
    let mut belief = initial.clone();
    let mut out = Vec::with_capacity(ys.nrows());
    for y in ys.row_iter() {
        belief = kalman_step(&belief, sys, &y.transpose())?;
        out.push(belief.clone());
    }
    Ok(out)
}

fn logsumexp(v: &DVector<f64>) -> f64 {
    let max = v.max();
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    pub particles: DMatrix<f64>,
    /// Normalized: logsumexp = 0.
    pub log_weights: DVector<f64>,
    pub ess: f64,
}

impl ParticleCloud {
    pub fn from_prior(prior: &NaturalParams, n: usize, rng: &mut FilterRng) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one particle".into()));
        }
        Ok(Self::uniform(prior.sample(n, rng)?))
    }

    fn uniform(particles: DMatrix<f64>) -> Self {
        let n = particles.nrows();
        Self { particles, log_weights: DVector::from_element(n, -(n as f64).ln()), ess: n as f64 }
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> DVector<f64> {
        self.log_weights.map(f64::exp)
    }

    pub fn mean(&self) -> DVector<f64> {
        (self.particles.transpose() * self.weights()).into_owned()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let w = self.weights();
        let mean = self.mean();
        let centered = DMatrix::from_fn(self.len(), self.particles.ncols(), |i, j| self.particles[(i, j)] - mean[j]);
        let weighted = DMatrix::from_fn(centered.nrows(), centered.ncols(), |i, j| centered[(i, j)] * w[i]);
        centered.transpose() * weighted
    }

    fn normalize(&mut self) -> Result<()> {
        let total = logsumexp(&self.log_weights);
        if !total.is_finite() {
            return Err(Error::Numeric("all particle weights vanished".into()));
        }
        self.log_weights.add_scalar_mut(-total);
        self.ess = 1.0 / self.log_weights.iter().map(|w| (2.0 * w).exp()).sum::<f64>();
        Ok(())
    }

    /// Systematic resampling to equal weights.
    pub fn resample(&mut self, rng: &mut FilterRng) {
        let n = self.len();
        let w = self.weights();
        let u0: f64 = rng.random::<f64>() / n as f64;
        let mut indices = Vec::with_capacity(n);
        let mut cumulative = w[0];
        let mut j = 0;
        for i in 0..n {
            let u = u0 + i as f64 / n as f64;
            while u > cumulative && j + 1 < n {
                j += 1;
                cumulative += w[j];
            }
            indices.push(j);
        }
        let resampled = DMatrix::from_fn(n, self.particles.ncols(), |i, c| self.particles[(indices[i], c)]);
        *self = Self::uniform(resampled);
    }
}

/// Bootstrap particle filter: propagate through the dynamics, reweight by the likelihood,
/// resample systematically when ESS < threshold·n.
pub fn bpf_step(
    cloud: &ParticleCloud,
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut FilterRng,
    threshold: f64,
) -> Result<ParticleCloud> {
    let particles = dynamics.sample_rows(&cloud.particles, rng)?;
    let mut log_weights = cloud.log_weights.clone();
    for (i, row) in particles.row_iter().enumerate() {
        log_weights[i] += obs.log_likelihood(&row.transpose(), y)?;
    }
    let mut next = ParticleCloud { particles, log_weights, ess: 0.0 };
    next.normalize()?;
    if next.ess < threshold * next.len() as f64 {
        next.resample(rng);
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: DMatrix<f64>,
}

impl Ensemble {
    pub fn from_prior(prior: &NaturalParams, n: usize, rng: &mut FilterRng) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter("an ensemble needs at least two members".into()));
        }
        Ok(Self { members: prior.sample(n, rng)? })
    }

    pub fn len(&self) -> usize {
        self.members.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.row_mean().transpose()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let a = anomalies(&self.members);
        a.transpose() * &a / (self.len() - 1) as f64
    }
}

fn anomalies(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j])
}

/// Stochastic (perturbed-observation) EnKF. Poisson likelihoods are moment matched per step
/// with variance equal to the ensemble-mean rate.
pub fn enkf_step(
    ensemble: &Ensemble,
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut FilterRng,
) -> Result<Ensemble> {
    let n = ensemble.len();
    if n < 2 {
        return Err(Error::InvalidParameter("an ensemble needs at least two members".into()));
    }
    let forecast = dynamics.sample_rows(&ensemble.members, rng)?;
    let k = obs.obs_dim();
    let mut predicted = DMatrix::zeros(n, k);
    let mut noise_var = DVector::zeros(k);
    for (i, row) in forecast.row_iter().enumerate() {
        let (mean, var) = obs.conditional_moments(&row.transpose())?;
        predicted.row_mut(i).copy_from(&mean.transpose());
        noise_var += var;
    }
    noise_var /= n as f64;
    let x_anom = anomalies(&forecast);
    let y_anom = anomalies(&predicted);
    let scale = 1.0 / (n - 1) as f64;
    let p_xy = x_anom.transpose() * &y_anom * scale;
    let p_yy = gaussian::symmetrize(&(y_anom.transpose() * &y_anom * scale + DMatrix::from_diagonal(&noise_var)));
    let chol = gaussian::cholesky(&p_yy)
        .ok_or_else(|| Error::Numeric("ensemble innovation covariance is degenerate".into()))?;
    let gain_t = chol.solve(&p_xy.transpose());
    let mut members = forecast;
    for i in 0..n {
        let perturbed = DVector::from_fn(k, |j, _| {
            let e: f64 = StandardNormal.sample(rng);
            y[j] + noise_var[j].sqrt() * e
        });
        let innovation = perturbed - predicted.row(i).transpose();
        let shift = gain_t.transpose() * innovation;
        for c in 0..members.ncols() {
            members[(i, c)] += shift[c];
        }
    }
    if members.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ensemble update produced non-finite members".into()));
    }
    Ok(Ensemble { members })
}
