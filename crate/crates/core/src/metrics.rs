//! Evaluation metrics: state RMSE, filtering log-density, dynamics KL and Chamfer distance.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::expfam::{ensure_same, Family, NaturalParams};
use crate::rng::FilterRng;

/// Protocol for sampling states near the true attractor and comparing rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricProtocol {
    pub attractor_rollout: usize,
    /// Fraction of the rollout kept from the end.
    pub attractor_tail: f64,
    pub attractor_points: usize,
    pub perturbation_scale: f64,
    pub chamfer_rollouts: usize,
    pub chamfer_steps: usize,
    pub chamfer_seeds: usize,
}

impl Default for MetricProtocol {
    fn default() -> Self {
        Self {
            attractor_rollout: 5000,
            attractor_tail: 0.6,
            attractor_points: 500,
            perturbation_scale: 0.1,
            chamfer_rollouts: 10,
            chamfer_steps: 500,
            chamfer_seeds: 10,
        }
    }
}

pub fn rmse(estimates: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimates.shape() != truth.shape() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "estimates {:?} vs truth {:?}",
            estimates.shape(),
            truth.shape()
        )));
    }
    Ok(((estimates - truth).norm_squared() / truth.len() as f64).sqrt())
}

/// T⁻¹ Σ_t log q_t(z_t). Any truth point outside a posterior's support makes the result −∞.
pub fn filtering_log_density(posteriors: &[NaturalParams], truth: &DMatrix<f64>) -> Result<f64> {
    if posteriors.len() != truth.nrows() || posteriors.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} posteriors for {} true states",
            posteriors.len(),
            truth.nrows()
        )));
    }
    let mut total = 0.0;
    for (q, z) in posteriors.iter().zip(truth.row_iter()) {
        total += q.log_density(&z.transpose())?;
    }
    Ok(total / posteriors.len() as f64)
}

fn project_to_support(family: Family, z: &mut DVector<f64>) {
    match family {
        Family::ContinuousBernoulli(_) => z.apply(|v| *v = v.clamp(0.0, 1.0)),
        Family::Gamma(_) => z.apply(|v| *v = v.abs().max(1e-6)),
        _ => {}
    }
}

/// Ancestral rollout of `steps` states (rows) starting after `z0`.
pub fn rollout(dynamics: &DynamicsModel, z0: &DVector<f64>, steps: usize, rng: &mut FilterRng) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(steps, z0.len());
    let mut z = z0.clone();
    for t in 0..steps {
        z = dynamics.conditional_sample(&z, rng)?;
        out.row_mut(t).copy_from(&z.transpose());
    }
    Ok(out)
}

/// Points from the tail of a long rollout of the true dynamics, thinned evenly.
pub fn attractor_samples(
    dynamics: &DynamicsModel,
    z0: &DVector<f64>,
    protocol: &MetricProtocol,
    rng: &mut FilterRng,
) -> Result<DMatrix<f64>> {
    if !(protocol.attractor_tail > 0.0 && protocol.attractor_tail <= 1.0) || protocol.attractor_points == 0 {
        return Err(Error::InvalidParameter("attractor tail must lie in (0, 1] with ≥ 1 point".into()));
    }
    let path = rollout(dynamics, z0, protocol.attractor_rollout, rng)?;
    let tail = ((protocol.attractor_rollout as f64 * protocol.attractor_tail).round() as usize).max(1);
    let start = protocol.attractor_rollout - tail;
    let count = protocol.attractor_points.min(tail);
    Ok(DMatrix::from_fn(count, z0.len(), |i, j| path[(start + i * tail / count, j)]))
}

/// S⁻¹ Σ_i KL(p_true(·|Z_i) ‖ p_learned(·|Z_i)) at attractor points perturbed with N(0, scale²).
/// Perturbed points are projected back into the state support.
pub fn dynamics_kl(
    truth: &DynamicsModel,
    learned: &DynamicsModel,
    attractor: &DMatrix<f64>,
    scale: f64,
    rng: &mut FilterRng,
) -> Result<f64> {
    ensure_same(truth.family(), learned.family())?;
    if attractor.nrows() == 0 {
        return Err(Error::InvalidParameter("no attractor samples".into()));
    }
    let family = truth.family();
    let mut total = 0.0;
    for row in attractor.row_iter() {
        let mut z = row.transpose() + DVector::from_fn(row.len(), |_, _| scale * Distribution::<f64>::sample(&StandardNormal, rng));
        project_to_support(family, &mut z);
        total += truth.conditional_kl(learned, &z)?;
    }
    Ok(total / attractor.nrows() as f64)
}

fn directed_chamfer(from: &DMatrix<f64>, to: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for x in from.row_iter() {
        let mut best = f64::INFINITY;
        for y in to.row_iter() {
            let d = (x - y).norm_squared();
            if d < best {
                best = d;
            }
        }
        total += best.sqrt();
    }
    total / from.nrows() as f64
}

/// ½(D(S₁‖S₂) + D(S₂‖S₁)) with D(A‖B) the mean distance from points of A to their nearest
/// neighbour in B.
pub fn chamfer(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if s1.nrows() == 0 || s2.nrows() == 0 {
        return Err(Error::InvalidParameter("Chamfer distance of an empty set".into()));
    }
    if s1.ncols() != s2.ncols() {
        return Err(Error::ShapeMismatch("point sets live in different dimensions".into()));
    }
    if s1.iter().chain(s2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("point sets must be finite".into()));
    }
    Ok(0.5 * (directed_chamfer(s1, s2) + directed_chamfer(s2, s1)))
}

pub fn log_chamfer(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = chamfer(s1, s2)?;
    if d <= 0.0 {
        return Err(Error::Domain("log of a zero Chamfer distance".into()));
    }
    Ok(d.ln())
}

/// Pools `rollouts` rollouts of `steps` states from each model, started at the same points.
pub fn rollout_log_chamfer(
    truth: &DynamicsModel,
    learned: &DynamicsModel,
    starts: &DMatrix<f64>,
    steps: usize,
    rng: &mut FilterRng,
) -> Result<f64> {
    let l = truth.dim();
    let pooled = |model: &DynamicsModel, rng: &mut FilterRng| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(starts.nrows() * steps, l);
        for (k, z0) in starts.row_iter().enumerate() {
            let path = rollout(model, &z0.transpose(), steps, rng)?;
            out.rows_mut(k * steps, steps).copy_from(&path);
        }
        Ok(out)
    };
    let a = pooled(truth, rng)?;
    let b = pooled(learned, rng)?;
    log_chamfer(&a, &b)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
