//! Whole-sequence runs of eVKF and the baseline filters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{bpf_step, enkf_step, Ensemble, ParticleCloud, DEFAULT_RESAMPLE_THRESHOLD};
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::expfam::NaturalParams;
use crate::filter::{Diagnostics, Evkf, EvkfConfig, LearningObjective};
use crate::observations::ObservationModel;
use crate::rng::FilterRng;

/// Online learning settings used for the synthetic learning experiments: the KL objective,
/// an Adam step every `learn_every` observations and replayed minibatches over everything seen.
pub fn learning_config(learn_every: usize) -> EvkfConfig {
    let mut cfg = EvkfConfig {
        learn_every: Some(learn_every),
        learn_epochs: 100,
        replay_capacity: 100_000,
        replay_batch: Some(128),
        objective: LearningObjective::Kl,
        ..Default::default()
    };
    cfg.adam.step_size = 3e-2;
    cfg
}

#[derive(Clone, Debug)]
pub struct EvkfRun {
    pub posteriors: Vec<NaturalParams>,
    /// Posterior means, one row per step.
    pub estimates: DMatrix<f64>,
    pub diagnostics: Vec<Diagnostics>,
    pub dynamics: DynamicsModel,
    pub wall_us_per_step: f64,
}

/// Filters every row of `ys`, learning during the first `train_steps` and frozen afterwards.
pub fn run_evkf(
    ys: &DMatrix<f64>,
    dynamics: DynamicsModel,
    obs: ObservationModel,
    config: EvkfConfig,
    q0: Option<NaturalParams>,
    train_steps: usize,
    rng: &mut FilterRng,
) -> Result<EvkfRun> {
    let mut filter = Evkf::new(config, dynamics, obs, q0)?;
    let steps = ys.nrows();
    let mut posteriors = Vec::with_capacity(steps);
    let mut diagnostics = Vec::with_capacity(steps);
    let mut estimates = DMatrix::zeros(steps, filter.dynamics().dim());
    let mut wall = 0.0;
    for (t, y) in ys.row_iter().enumerate() {
        if t == train_steps {
            filter.freeze();
        }
        let state = filter.step(&y.transpose(), rng)?;
        estimates.row_mut(t).copy_from(&state.q_filter.state_mean()?.transpose());
        wall += state.diagnostics.wall_us;
        posteriors.push(state.q_filter.clone());
        diagnostics.push(state.diagnostics.clone());
    }
    Ok(EvkfRun {
        posteriors,
        estimates,
        diagnostics,
        dynamics: filter.dynamics().clone(),
        wall_us_per_step: wall / steps.max(1) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    Bpf { particles: usize },
    Enkf { members: usize },
}

/// Posterior means of a bootstrap particle filter or ensemble Kalman filter, one row per step.
pub fn run_baseline(
    baseline: Baseline,
    ys: &DMatrix<f64>,
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    prior: &NaturalParams,
    rng: &mut FilterRng,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(ys.nrows(), dynamics.dim());
    let mut record = |t: usize, mean: DVector<f64>| -> Result<()> {
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite baseline estimate at step {t}")));
        }
        out.row_mut(t).copy_from(&mean.transpose());
        Ok(())
    };
    match baseline {
        Baseline::Bpf { particles } => {
            let mut cloud = ParticleCloud::from_prior(prior, particles, rng)?;
            for (t, y) in ys.row_iter().enumerate() {
                cloud = bpf_step(&cloud, dynamics, obs, &y.transpose(), rng, DEFAULT_RESAMPLE_THRESHOLD)?;
                record(t, cloud.mean())?;
            }
        }
        Baseline::Enkf { members } => {
            let mut ensemble = Ensemble::from_prior(prior, members, rng)?;
            for (t, y) in ys.row_iter().enumerate() {
                ensemble = enkf_step(&ensemble, dynamics, obs, &y.transpose(), rng)?;
                record(t, ensemble.mean())?;
            }
        }
    }
    Ok(out)
}
