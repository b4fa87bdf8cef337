//! A single trial: data, filter and metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use evkf_core::baselines::{kalman_filter, GaussianBelief, LinearSystem};
use evkf_core::dynamics::DynamicsModel;
use evkf_core::experiment::{run_baseline, run_evkf};
use evkf_core::filter::Diagnostics;
use evkf_core::metrics::{attractor_samples, dynamics_kl, filtering_log_density, rmse, rollout_log_chamfer};
use evkf_core::rng::{seeded, split, trial_stream};
use evkf_core::simulate::{default_learner, make_experiment, ExperimentSpec, System, Trajectory};
use evkf_core::NaturalParams;
use nalgebra::{DMatrix, DVector};

use crate::config::{FilterChoice, Learner, RunConfig};
use crate::error::Result;

pub fn trajectory(config: &RunConfig, trial: usize) -> Result<Trajectory> {
    let mut tr = make_experiment(&ExperimentSpec {
        system: config.experiment,
        latent_dim: config.latent_dim,
        obs_dim: config.obs_dim,
        steps: config.steps(),
        seed: config.trial_seed(trial),
    })?;
    tr.meta.config_hash = Some(config.hash());
    Ok(tr)
}

#[derive(Clone, Debug)]
pub struct TrialRun {
    /// Posterior means, one row per step.
    pub estimates: DMatrix<f64>,
    pub posteriors: Option<Vec<NaturalParams>>,
    pub diagnostics: Option<Vec<Diagnostics>>,
    /// Dynamics after training, frozen for the evaluation steps.
    pub dynamics: DynamicsModel,
    /// The model the filter started from, when it was trained.
    pub initial: Option<DynamicsModel>,
    pub wall_us_per_step: f64,
}

pub fn run_trial(config: &RunConfig, filter: &FilterChoice, data: &Trajectory, trial: usize) -> Result<TrialRun> {
    let truth = data.meta.dynamics.clone();
    let obs = data.meta.observations.clone();
    let mut rng = trial_stream(config.seed, trial as u64);
    let ys = &data.observations;
    let steps = ys.nrows() as f64;
    let prior = truth.family().default_prior();
    match filter {
        FilterChoice::Evkf { config: evkf, learner } => {
            let mut init_rng = split(&mut rng);
            let l = truth.dim();
            let model = match *learner {
                Learner::Truth => truth,
                Learner::Network { gaussian_noise } => default_learner(config.experiment, l, gaussian_noise, &mut init_rng)?,
                Learner::GaussianNetwork { gaussian_noise } => {
                    default_learner(System::VdpGaussian, l, gaussian_noise, &mut init_rng)?
                }
            };
            let initial = (*learner != Learner::Truth).then(|| model.clone());
            let run = run_evkf(ys, model, obs, evkf.clone(), None, config.t_train, &mut rng)?;
            Ok(TrialRun {
                estimates: run.estimates,
                posteriors: Some(run.posteriors),
                diagnostics: Some(run.diagnostics),
                dynamics: run.dynamics,
                initial,
                wall_us_per_step: run.wall_us_per_step,
            })
        }
        FilterChoice::Kalman => {
            let sys = LinearSystem::from_models(&truth, &obs)?;
            let (mean, cov) = prior.gaussian_moments()?;
            let started = Instant::now();
            let beliefs = kalman_filter(&sys, &GaussianBelief { mean, cov }, ys)?;
            let wall_us_per_step = started.elapsed().as_secs_f64() * 1e6 / steps;
            let mut estimates = DMatrix::zeros(beliefs.len(), truth.dim());
            let mut posteriors = Vec::with_capacity(beliefs.len());
            for (t, b) in beliefs.iter().enumerate() {
                estimates.row_mut(t).copy_from(&b.mean.transpose());
                posteriors.push(NaturalParams::gaussian(&b.mean, &b.cov)?);
            }
            Ok(TrialRun {
                estimates,
                posteriors: Some(posteriors),
                diagnostics: None,
                dynamics: truth,
                initial: None,
                wall_us_per_step,
            })
        }
        FilterChoice::Bpf { .. } | FilterChoice::Enkf { .. } => {
            let baseline = filter.baseline().expect("particle filters are baselines");
            let started = Instant::now();
            let estimates = run_baseline(baseline, ys, &truth, &obs, &prior, &mut rng)?;
            let wall_us_per_step = started.elapsed().as_secs_f64() * 1e6 / steps;
            Ok(TrialRun { estimates, posteriors: None, diagnostics: None, dynamics: truth, initial: None, wall_us_per_step })
        }
    }
}

/// RMSE and log-density over the evaluation window, plus dynamics KL and rollout log-Chamfer
/// when the dynamics were learned, with the KL of the untrained model for reference.
/// Non-finite values are kept as `None`.
pub fn trial_metrics(config: &RunConfig, data: &Trajectory, run: &TrialRun, trial: usize) -> Result<BTreeMap<String, Option<f64>>> {
    let total = data.len();
    let (start, len) = if config.t_eval > 0 { (config.t_train, config.t_eval) } else { (0, total) };
    let truth_window = data.latents.rows(start, len).into_owned();
    let mut out = BTreeMap::new();
    let mut put = |name: &str, v: f64| {
        out.insert(name.to_string(), v.is_finite().then_some(v));
    };
    put("rmse", rmse(&run.estimates.rows(start, len).into_owned(), &truth_window)?);
    if let Some(posteriors) = &run.posteriors {
        put("log_density", filtering_log_density(&posteriors[start..start + len], &truth_window)?);
    }
    if let Some(initial) = &run.initial {
        let truth = &data.meta.dynamics;
        let protocol = &config.metrics;
        let mut rng = seeded(config.trial_seed(trial) ^ 0x6d65_7472_6963);
        if truth.family() == run.dynamics.family() {
            let z0 = DVector::from_column_slice(&data.meta.z0);
            let attractor = attractor_samples(truth, &z0, protocol, &mut rng)?;
            let scale = protocol.perturbation_scale;
            put("dynamics_kl", dynamics_kl(truth, &run.dynamics, &attractor, scale, &mut seeded(config.trial_seed(trial)))?);
            put("dynamics_kl_init", dynamics_kl(truth, initial, &attractor, scale, &mut seeded(config.trial_seed(trial)))?);
        }
        let k = protocol.chamfer_rollouts.clamp(1, total);
        let starts = DMatrix::from_fn(k, truth.dim(), |i, j| data.latents[(i * total / k, j)]);
        let mut chamfer = 0.0;
        for _ in 0..protocol.chamfer_seeds.max(1) {
            // a learned model whose rollouts leave the support or blow up is infinitely far away
            chamfer += rollout_log_chamfer(truth, &run.dynamics, &starts, protocol.chamfer_steps, &mut rng)
                .unwrap_or(f64::INFINITY);
        }
        put("log_chamfer", chamfer / protocol.chamfer_seeds.max(1) as f64);
    }
    Ok(out)
}
