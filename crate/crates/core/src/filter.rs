//! The exponential-family variational Kalman filter: variational predict, CVI update,
//! evidence bounds and online dynamics learning.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::expfam::{ensure_same, gaussian, Family, MeanParams, NaturalParams};
use crate::nn::{AdamConfig, AdamState};
use crate::observations::ObservationModel;
use crate::rng::FilterRng;

const MAX_HALVINGS: usize = 10;
/// Near a domain boundary the admissible step can be far shorter than an ELBO-improving one.
const MAX_DOMAIN_HALVINGS: usize = 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceCorrection {
    None,
    #[default]
    EkfLike,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningObjective {
    /// ½‖λ* − λ̄_θ‖²
    #[default]
    SquaredNatural,
    /// KL(q(λ*) ‖ q̄_θ)
    Kl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvkfConfig {
    pub mc_samples_predict: usize,
    pub cvi_step_size: f64,
    pub cvi_max_iters: usize,
    pub cvi_tol: f64,
    pub variance_correction: VarianceCorrection,
    /// `None` disables learning.
    pub learn_every: Option<usize>,
    pub learn_mc_samples: usize,
    /// Optimizer steps per learning update. The first uses the gradients accumulated online
    /// over the window; later ones recompute gradients on stored (q_{t−1}, λ*_t) pairs.
    pub learn_epochs: usize,
    /// Pairs kept for replay. 0 keeps only the current window.
    pub replay_capacity: usize,
    /// Pairs drawn (with replacement) per replay step; `None` uses every stored pair.
    pub replay_batch: Option<usize>,
    pub objective: LearningObjective,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub compute_bounds: bool,
    pub bounds_mc_samples: usize,
}

impl Default for EvkfConfig {
    fn default() -> Self {
        Self {
            mc_samples_predict: 32,
            cvi_step_size: 0.5,
            cvi_max_iters: 20,
            cvi_tol: 1e-6,
            variance_correction: VarianceCorrection::EkfLike,
            learn_every: None,
            learn_mc_samples: 10,
            learn_epochs: 1,
            replay_capacity: 0,
            replay_batch: None,
            objective: LearningObjective::SquaredNatural,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            compute_bounds: false,
            bounds_mc_samples: 64,
        }
    }
}

impl EvkfConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("mc_samples_predict", self.mc_samples_predict),
            ("cvi_max_iters", self.cvi_max_iters),
            ("learn_mc_samples", self.learn_mc_samples),
            ("learn_epochs", self.learn_epochs),
            ("bounds_mc_samples", self.bounds_mc_samples),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
            }
        }
        if self.replay_batch == Some(0) {
            return Err(Error::InvalidParameter("replay_batch must be at least 1".into()));
        }
        if self.learn_every == Some(0) {
            return Err(Error::InvalidParameter("learn_every must be at least 1".into()));
        }
        if !(self.cvi_step_size > 0.0 && self.cvi_step_size <= 1.0) {
            return Err(Error::InvalidParameter("cvi_step_size must lie in (0, 1]".into()));
        }
        if !(self.cvi_tol > 0.0) || !(self.adam.step_size > 0.0) {
            return Err(Error::InvalidParameter("tolerances and step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Draws from q used for Monte Carlo expectations. Gaussian families use antithetic pairs.
pub fn draw_samples(q: &NaturalParams, n: usize, rng: &mut FilterRng) -> Result<DMatrix<f64>> {
    if !q.family().is_gaussian() {
        return q.sample(n, rng);
    }
    let (mean, cov) = q.gaussian_moments()?;
    let chol = gaussian::cholesky(&cov)
        .ok_or_else(|| Error::Numeric("covariance factorization failed".into()))?;
    let lower = chol.l();
    let l = mean.len();
    let mut out = DMatrix::zeros(n, l);
    let mut r = 0;
    while r < n {
        let eps = DVector::from_fn(l, |_, _| StandardNormal.sample(rng));
        let offset = &lower * eps;
        out.row_mut(r).copy_from(&(&mean + &offset).transpose());
        if r + 1 < n {
            out.row_mut(r + 1).copy_from(&(&mean - &offset).transpose());
        }
        r += 2;
    }
    Ok(out)
}

fn average(rows: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(rows[0].len());
    for r in rows {
        acc += r;
    }
    acc / rows.len() as f64
}

fn check_pair(q: &NaturalParams, dynamics: &DynamicsModel) -> Result<()> {
    ensure_same(dynamics.family(), q.family())
}

/// λ̄_θ = E_q[λ_θ(z)] without variance correction. Exact for linear Gaussian dynamics.
pub fn predict_natural(
    q_prev: &NaturalParams,
    dynamics: &DynamicsModel,
    samples: usize,
    rng: &mut FilterRng,
) -> Result<NaturalParams> {
    check_pair(q_prev, dynamics)?;
    if let DynamicsModel::LinearGaussian { .. } = dynamics {
        let mean = q_prev.state_mean()?;
        return dynamics.natural_map(&mean);
    }
    let zs = draw_samples(q_prev, samples, rng)?;
    let rows = dynamics.natural_map_rows(&zs)?;
    NaturalParams::new(dynamics.family(), average(&rows))
}

/// The variational prediction q̄, optionally with the variance correction applied.
pub fn predict(
    q_prev: &NaturalParams,
    dynamics: &DynamicsModel,
    config: &EvkfConfig,
    rng: &mut FilterRng,
) -> Result<NaturalParams> {
    let bar = predict_natural(q_prev, dynamics, config.mc_samples_predict, rng)?;
    if config.variance_correction == VarianceCorrection::None {
        return Ok(bar);
    }
    match dynamics {
        DynamicsModel::LinearGaussian { .. }
        | DynamicsModel::MlpGaussian { .. }
        | DynamicsModel::FixedGaussian { .. } => {
            let (m_prev, p_prev) = q_prev.gaussian_moments()?;
            let (m_bar, _) = bar.gaussian_moments()?;
            let jac = dynamics.mean_jacobian(&m_prev)?;
            let q = &dynamics.noise().expect("gaussian dynamics carry noise").q;
            let cov = gaussian::symmetrize(&(q + &jac * p_prev * jac.transpose()));
            NaturalParams::gaussian(&m_bar, &cov)
        }
        DynamicsModel::MlpGamma { b0, .. } => {
            let (shape, rate) = q_prev.gamma_shape_rate()?;
            let m_prev = shape.component_div(&rate);
            let sd_prev = DVector::from_fn(shape.len(), |i, _| shape[i].sqrt() / rate[i]);
            let jac = dynamics.mean_jacobian(&m_prev)?;
            let m_bar = bar.state_mean()?;
            let l = m_bar.len();
            let mut new_shape = DVector::zeros(l);
            let mut new_rate = DVector::zeros(l);
            for i in 0..l {
                let spread: f64 = (0..l).map(|j| (jac[(i, j)] * sd_prev[j]).powi(2)).sum();
                let var = 1.0 / b0 + spread;
                new_shape[i] = m_bar[i] * m_bar[i] / var;
                new_rate[i] = m_bar[i] / var;
            }
            NaturalParams::gamma(&new_shape, &new_rate)
        }
        DynamicsModel::MlpCb { .. } => Ok(bar),
    }
}

/// Monte Carlo estimate of −H(q̄) − E_{q̄}E_q[log p_θ(z_t | z_{t−1})] as a function of the
/// mean parameters of q̄, written without the closed-form averaging of natural parameters.
fn prediction_objective(mu: &MeanParams, conditionals: &[(DVector<f64>, f64)]) -> Result<f64> {
    let q = mu.to_natural()?;
    let cross: f64 = conditionals
        .iter()
        .map(|(lambda, a)| lambda.dot(mu.mu()) - a)
        .sum::<f64>()
        / conditionals.len() as f64;
    Ok(-q.entropy()? - cross)
}

/// Free coordinates of the mean parameters (upper triangle only for dense Gaussians).
fn free_coordinates(family: Family) -> Vec<(usize, Option<usize>)> {
    match family {
        Family::GaussianDense(l) => {
            let mut out: Vec<(usize, Option<usize>)> = (0..l).map(|i| (i, None)).collect();
            for c in 0..l {
                for r in 0..=c {
                    let k = l + c * l + r;
                    let mirror = l + r * l + c;
                    out.push((k, if mirror != k { Some(mirror) } else { None }));
                }
            }
            out
        }
        f => (0..f.stat_dim()).map(|i| (i, None)).collect(),
    }
}

/// Independent check of the closed-form prediction: numerically minimizes the Monte Carlo
/// upper bound over q̄ by damped Newton in mean coordinates with finite-difference derivatives.
/// Draws the same samples as [`predict_natural`] for an identical `rng` state.
pub fn predict_oracle(
    q_prev: &NaturalParams,
    dynamics: &DynamicsModel,
    samples: usize,
    rng: &mut FilterRng,
) -> Result<NaturalParams> {
    check_pair(q_prev, dynamics)?;
    let family = dynamics.family();
    if family.dim() > 2 {
        return Err(Error::InvalidParameter("the prediction oracle supports L ≤ 2".into()));
    }
    let zs = draw_samples(q_prev, samples, rng)?;
    let conditionals = dynamics
        .natural_map_rows(&zs)?
        .into_iter()
        .map(|lambda| {
            let a = NaturalParams::new(family, lambda.clone())?.log_partition()?;
            Ok((lambda, a))
        })
        .collect::<Result<Vec<_>>>()?;
    let coords = free_coordinates(family);
    let d = coords.len();
    let embed = |base: &DVector<f64>, step: &DVector<f64>| {
        let mut mu = base.clone();
        for (j, (k, mirror)) in coords.iter().enumerate() {
            mu[*k] += step[j];
            if let Some(m) = mirror {
                mu[*m] += step[j];
            }
        }
        mu
    };
    let eval = |mu: &DVector<f64>| -> Option<f64> {
        let mp = MeanParams::new(family, mu.clone()).ok()?;
        prediction_objective(&mp, &conditionals).ok().filter(|v| v.is_finite())
    };
    let mut mu = family.default_prior().to_mean()?.mu().clone();
    let mut value = eval(&mu).ok_or_else(|| Error::Numeric("oracle start is infeasible".into()))?;
    for _ in 0..200 {
        let scale = |j: usize| 1e-4 * mu[coords[j].0].abs().max(1e-2);
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        let unit = |j: usize, h: f64| DVector::from_fn(d, |i, _| if i == j { h } else { 0.0 });
        let mut feasible = true;
        for j in 0..d {
            let hj = scale(j);
            let (Some(fp), Some(fm)) = (eval(&embed(&mu, &unit(j, hj))), eval(&embed(&mu, &unit(j, -hj))))
            else {
                feasible = false;
                break;
            };
            grad[j] = (fp - fm) / (2.0 * hj);
            hess[(j, j)] = (fp - 2.0 * value + fm) / (hj * hj);
            for k in 0..j {
                let hk = scale(k);
                let shift = |a: f64, b: f64| embed(&mu, &(unit(j, a * hj) + unit(k, b * hk)));
                let vals = [shift(1.0, 1.0), shift(1.0, -1.0), shift(-1.0, 1.0), shift(-1.0, -1.0)]
                    .map(|m| eval(&m));
                let [Some(pp), Some(pm), Some(mp), Some(mm)] = vals else {
                    feasible = false;
                    break;
                };
                let h = (pp - pm - mp + mm) / (4.0 * hj * hk);
                hess[(j, k)] = h;
                hess[(k, j)] = h;
            }
        }
        if !feasible {
            return Err(Error::Numeric("oracle stepped outside the mean domain".into()));
        }
        let direction = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -grad.clone(),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = embed(&mu, &(&direction * t));
            if let Some(v) = eval(&cand) {
                if v <= value {
                    let change = (&cand - &mu).amax();
                    mu = cand;
                    value = v;
                    accepted = true;
                    if change < 1e-11 * mu.amax().max(1.0) {
                        return MeanParams::new(family, mu)?.to_natural();
                    }
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    MeanParams::new(family, mu)?.to_natural()
}

/// ELBO 𝓛(λ) = E_q[log p(y|z)] − KL(q ‖ q̄).
pub fn elbo(q: &NaturalParams, q_pred: &NaturalParams, obs: &ObservationModel, y: &DVector<f64>) -> Result<f64> {
    Ok(obs.expected_loglik(q, y)? - q.kl(q_pred)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub posterior: NaturalParams,
    pub elbo: f64,
    pub iterations: usize,
}

fn is_conjugate(family: Family, obs: &ObservationModel) -> bool {
    family.is_gaussian() && matches!(obs, ObservationModel::LinearGaussian { .. })
}

/// A Gamma predictive with rate β_l ≤ C_nl has no Poisson expectation. CVI then starts from the
/// same mean with shape and rate scaled up until β_l ≥ 2 max_n C_nl.
fn gamma_mgf_start(q_pred: &NaturalParams, obs: &ObservationModel) -> Result<NaturalParams> {
    let (c, _) = obs.loading();
    let (mut shape, mut rate) = q_pred.gamma_shape_rate()?;
    for i in 0..rate.len() {
        let needed = 2.0 * c.column(i).max();
        if rate[i] < needed {
            let k = needed / rate[i];
            shape[i] *= k;
            rate[i] *= k;
        }
    }
    NaturalParams::gamma(&shape, &rate)
}

/// CVI: λ ← (1 − β)λ + β(λ̄ + ∇_μ E_q[log p(y|z)]), started from λ̄, with ELBO backtracking.
pub fn update(
    q_pred: &NaturalParams,
    obs: &ObservationModel,
    y: &DVector<f64>,
    config: &EvkfConfig,
) -> Result<UpdateOutcome> {
    let family = q_pred.family();
    if is_conjugate(family, obs) {
        let grad = obs.grad_expected_loglik_mean_params(q_pred, y)?;
        let posterior = NaturalParams::new(family, q_pred.lambda() + grad)?;
        let value = elbo(&posterior, q_pred, obs, y)?;
        return Ok(UpdateOutcome { posterior, elbo: value, iterations: 1 });
    }
    let mut current = q_pred.clone();
    let mut current_elbo = match elbo(&current, q_pred, obs, y) {
        Err(Error::Domain(_)) if matches!(family, Family::Gamma(_)) => {
            current = gamma_mgf_start(q_pred, obs)?;
            elbo(&current, q_pred, obs, y)?
        }
        other => other?,
    };
    let mut iterations = 0;
    while iterations < config.cvi_max_iters {
        iterations += 1;
        let (_, grad) = obs.expected_loglik_and_grad(&current, y)?;
        let target = q_pred.lambda() + grad;
        let mut beta = config.cvi_step_size;
        let mut next = None;
        let mut domain_failure = false;
        let (mut decreases, mut exits) = (0, 0);
        while decreases <= MAX_HALVINGS && exits <= MAX_DOMAIN_HALVINGS {
            let lambda = current.lambda() * (1.0 - beta) + &target * beta;
            let candidate = NaturalParams::new(family, lambda)
                .and_then(|c| elbo(&c, q_pred, obs, y).map(|v| (c, v)));
            match candidate {
                Ok((c, v)) if v.is_finite() && v >= current_elbo - 1e-12 * current_elbo.abs().max(1.0) => {
                    next = Some((c, v));
                    break;
                }
                Ok(_) => {
                    domain_failure = false;
                    decreases += 1;
                }
                Err(_) => {
                    domain_failure = true;
                    exits += 1;
                }
            }
            beta *= 0.5;
        }
        let Some((candidate, value)) = next else {
            if domain_failure {
                return Err(Error::UpdateFailed {
                    message: "every backtracked CVI step left the natural-parameter domain".into(),
                    last_valid: current.lambda().as_slice().to_vec(),
                });
            }
            break;
        };
        let change = (candidate.lambda() - current.lambda()).amax();
        current = candidate;
        current_elbo = value;
        if change < config.cvi_tol {
            break;
        }
    }
    Ok(UpdateOutcome { posterior: current, elbo: current_elbo, iterations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Two-step bound 𝓛_t.
    pub two_step: f64,
    /// Single-step bound 𝓜_t.
    pub single_step: f64,
    pub gap: f64,
}

/// Monte Carlo Jensen gap Δ = E_q[A(λ_θ(z))] − A(E_q[λ_θ(z)]) and the bounds built on it.
/// The expectations share one set of draws, so Δ ≥ 0 holds up to rounding.
pub fn compute_bounds(
    q_prev: &NaturalParams,
    q_post: &NaturalParams,
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    y: &DVector<f64>,
    samples: usize,
    rng: &mut FilterRng,
) -> Result<Bounds> {
    check_pair(q_prev, dynamics)?;
    ensure_same(q_prev.family(), q_post.family())?;
    let family = dynamics.family();
    let zs = draw_samples(q_prev, samples, rng)?;
    let rows = dynamics.natural_map_rows(&zs)?;
    let mut mean_a = 0.0;
    for r in &rows {
        mean_a += NaturalParams::new(family, r.clone())?.log_partition()?;
    }
    mean_a /= rows.len() as f64;
    let bar = NaturalParams::new(family, average(&rows))?;
    let gap = mean_a - bar.log_partition()?;
    let two_step = elbo(q_post, &bar, obs, y)?;
    Ok(Bounds { two_step, single_step: two_step - gap, gap })
}

/// Squared natural-parameter or KL loss with its gradient with respect to the dynamics parameters.
pub fn dynamics_loss_and_grad(
    lambda_star: &NaturalParams,
    q_prev: &NaturalParams,
    dynamics: &DynamicsModel,
    objective: LearningObjective,
    samples: usize,
    rng: &mut FilterRng,
) -> Result<(f64, DVector<f64>)> {
    check_pair(q_prev, dynamics)?;
    ensure_same(dynamics.family(), lambda_star.family())?;
    let zs = draw_samples(q_prev, samples, rng)?;
    let rows = dynamics.natural_map_rows(&zs)?;
    let bar = average(&rows);
    let (loss, upstream) = match objective {
        LearningObjective::SquaredNatural => {
            let diff = &bar - lambda_star.lambda();
            (0.5 * diff.norm_squared(), diff)
        }
        LearningObjective::Kl => {
            let q_bar = NaturalParams::new(dynamics.family(), bar)?;
            let mu_bar = q_bar.to_mean()?;
            let mu_star = lambda_star.to_mean()?;
            (lambda_star.kl(&q_bar)?, mu_bar.mu() - mu_star.mu())
        }
    };
    let mut grad = DVector::zeros(dynamics.num_params());
    for z in zs.row_iter() {
        grad += dynamics.natural_map_vjp(&z.transpose(), &upstream)?;
    }
    Ok((loss, grad / zs.nrows() as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub elbo_l: f64,
    pub elbo_m: Option<f64>,
    pub gap: Option<f64>,
    pub cvi_iters: usize,
    pub learn_loss: Option<f64>,
    pub wall_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub t: usize,
    pub q_filter: NaturalParams,
    pub q_pred: NaturalParams,
    pub mu_filter: MeanParams,
    pub diagnostics: Diagnostics,
}

impl FilterState {
    pub fn initial(q0: NaturalParams) -> Result<Self> {
        let mu_filter = q0.to_mean()?;
        Ok(Self { t: 0, q_pred: q0.clone(), q_filter: q0, mu_filter, diagnostics: Diagnostics::default() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Optimizer {
    Adam(AdamState),
    Sgd(f64),
}

/// A running filter that owns its dynamics model and learns it online.
#[derive(Clone, Debug)]
pub struct Evkf {
    config: EvkfConfig,
    dynamics: DynamicsModel,
    observations: ObservationModel,
    state: FilterState,
    optimizer: Optimizer,
    grad_sum: DVector<f64>,
    grad_count: usize,
    /// (q_{t−1}, λ*_t) pairs for replay, kept only when `learn_epochs` > 1.
    replay: VecDeque<(NaturalParams, NaturalParams)>,
    frozen: bool,
}

impl Evkf {
    pub fn new(
        config: EvkfConfig,
        dynamics: DynamicsModel,
        observations: ObservationModel,
        q0: Option<NaturalParams>,
    ) -> Result<Self> {
        config.validate()?;
        dynamics.validate()?;
        observations.validate()?;
        if observations.latent_dim() != dynamics.dim() {
            return Err(Error::ShapeMismatch("observation and dynamics latent sizes differ".into()));
        }
        let q0 = q0.unwrap_or_else(|| dynamics.family().default_prior());
        check_pair(&q0, &dynamics)?;
        let n = dynamics.num_params();
        let optimizer = match config.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(n, config.adam)),
            OptimizerKind::Sgd => Optimizer::Sgd(config.adam.step_size),
        };
        Ok(Self {
            state: FilterState::initial(q0)?,
            config,
            dynamics,
            observations,
            optimizer,
            grad_sum: DVector::zeros(n),
            grad_count: 0,
            replay: VecDeque::new(),
            frozen: false,
        })
    }

    pub fn config(&self) -> &EvkfConfig {
        &self.config
    }

    pub fn dynamics(&self) -> &DynamicsModel {
        &self.dynamics
    }

    pub fn observations(&self) -> &ObservationModel {
        &self.observations
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    /// Stops further parameter updates; filtering continues with the current model.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.grad_sum.fill(0.0);
        self.grad_count = 0;
        self.replay.clear();
    }

    fn optimizer_step(&mut self, grad: &DVector<f64>) -> Result<()> {
        let mut params = self.dynamics.params();
        match &mut self.optimizer {
            Optimizer::Adam(state) => state.step(&mut params, grad)?,
            Optimizer::Sgd(rate) => {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite dynamics gradient".into()));
                }
                params -= grad * *rate;
            }
        }
        self.dynamics.set_params(&params)
    }

    fn replay_steps(&mut self, rng: &mut FilterRng) -> Result<()> {
        let stored = self.replay.len();
        for _ in 1..self.config.learn_epochs {
            let picks: Vec<usize> = match self.config.replay_batch {
                Some(b) => (0..b).map(|_| rng.random_range(0..stored)).collect(),
                None => (0..stored).collect(),
            };
            let mut total = DVector::zeros(self.dynamics.num_params());
            for &i in &picks {
                let (q_prev, star) = &self.replay[i];
                let (_, grad) = dynamics_loss_and_grad(
                    star,
                    q_prev,
                    &self.dynamics,
                    self.config.objective,
                    self.config.learn_mc_samples,
                    rng,
                )?;
                total += grad;
            }
            total /= picks.len() as f64;
            self.optimizer_step(&total)?;
        }
        if self.config.replay_capacity == 0 {
            self.replay.clear();
        }
        Ok(())
    }

    fn learning(&self) -> Option<usize> {
        if self.frozen || self.dynamics.num_params() == 0 {
            None
        } else {
            self.config.learn_every
        }
    }

    /// Predict, update, accumulate the learning gradient and apply an optimizer step every
    /// `learn_every` observations.
    pub fn step(&mut self, y: &DVector<f64>, rng: &mut FilterRng) -> Result<&FilterState> {
        let started = Instant::now();
        let q_prev = self.state.q_filter.clone();
        let q_pred = predict(&q_prev, &self.dynamics, &self.config, rng)?;
        let outcome = update(&q_pred, &self.observations, y, &self.config)?;
        let mut diagnostics = Diagnostics { elbo_l: outcome.elbo, cvi_iters: outcome.iterations, ..Default::default() };
        if self.config.compute_bounds {
            let b = compute_bounds(
                &q_prev,
                &outcome.posterior,
                &self.dynamics,
                &self.observations,
                y,
                self.config.bounds_mc_samples,
                rng,
            )?;
            diagnostics.elbo_l = b.two_step;
            diagnostics.elbo_m = Some(b.single_step);
            diagnostics.gap = Some(b.gap);
        }
        if let Some(every) = self.learning() {
            let (loss, grad) = dynamics_loss_and_grad(
                &outcome.posterior,
                &q_prev,
                &self.dynamics,
                self.config.objective,
                self.config.learn_mc_samples,
                rng,
            )?;
            diagnostics.learn_loss = Some(loss);
            self.grad_sum += grad;
            self.grad_count += 1;
            if self.config.learn_epochs > 1 {
                self.replay.push_back((q_prev.clone(), outcome.posterior.clone()));
                if self.config.replay_capacity > 0 && self.replay.len() > self.config.replay_capacity {
                    self.replay.pop_front();
                }
            }
            if self.grad_count >= every {
                let g = &self.grad_sum / self.grad_count as f64;
                self.optimizer_step(&g)?;
                self.grad_sum.fill(0.0);
                self.grad_count = 0;
                self.replay_steps(rng)?;
            }
        }
        let mu_filter = outcome.posterior.to_mean()?;
        diagnostics.wall_us = started.elapsed().as_secs_f64() * 1e6;
        self.state = FilterState {
            t: self.state.t + 1,
            q_filter: outcome.posterior,
            q_pred,
            mu_filter,
            diagnostics,
        };
        Ok(&self.state)
    }
}

/// Per-step diagnostics as CSV rows: t, elbo_L, elbo_M, gap, cvi_iters, wall_us.
pub struct DiagnosticsSink<W: Write> {
    out: W,
}

impl<W: Write> DiagnosticsSink<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "t,elbo_L,elbo_M,gap,cvi_iters,wall_us")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, state: &FilterState) -> std::io::Result<()> {
        let d = &state.diagnostics;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{},{},{},{},{},{:.3}",
            state.t,
            d.elbo_l,
            opt(d.elbo_m),
            opt(d.gap),
            d.cvi_iters,
            d.wall_us
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
