//! Synthetic data for the benchmark systems.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsModel, GaussianNoise};
use crate::error::{Error, Result};
use crate::expfam::special::softplus;
use crate::nn::{Activation, Mlp};
use crate::observations::ObservationModel;
use crate::rng::{seeded, split, FilterRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Crnn,
    VdpPoisson,
    VdpGaussian,
    Cb,
    Gamma,
    Lgssm,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Crnn => "crnn",
            System::VdpPoisson => "vdp_poisson",
            System::VdpGaussian => "vdp_gaussian",
            System::Cb => "cb",
            System::Gamma => "gamma",
            System::Lgssm => "lgssm",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "crnn" => System::Crnn,
            "vdp_poisson" => System::VdpPoisson,
            "vdp_gaussian" => System::VdpGaussian,
            "cb" => System::Cb,
            "gamma" => System::Gamma,
            "lgssm" => System::Lgssm,
            other => return Err(Error::InvalidParameter(format!("unknown experiment '{other}'"))),
        })
    }
}

pub const CRNN_GAMMA: f64 = 2.5;
pub const CRNN_TAU: f64 = 0.025;
pub const CRNN_DT: f64 = 1e-3;
pub const CRNN_NOISE: f64 = 1e-4;
/// Expected Poisson count per bin at z = 0.
pub const CRNN_BASE_COUNT: f64 = 2.0;
pub const VDP_GAMMA: f64 = 1.5;
pub const VDP_TAU: f64 = 0.1;
pub const VDP_SIGMA: f64 = 0.1;
pub const VDP_DT: f64 = 1e-2;
pub const VDP_BURN_IN: usize = 500;
pub const GAMMA_B0: f64 = 4.0;
pub const GAMMA_CENTER: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub system: System,
    pub latent_dim: Option<usize>,
    pub obs_dim: Option<usize>,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub system: String,
    pub seed: u64,
    pub dt: f64,
    pub burn_in: usize,
    pub z0: Vec<f64>,
    pub dynamics: DynamicsModel,
    pub observations: ObservationModel,
    /// Hash of the run configuration that produced the file, when written by the harness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub latents: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub meta: TrajectoryMeta,
}

/// Ancestral sampling of `steps` (z_t, y_t) pairs after `z0`.
pub fn simulate(
    dynamics: &DynamicsModel,
    obs: &ObservationModel,
    z0: &DVector<f64>,
    steps: usize,
    rng: &mut FilterRng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if steps == 0 {
        return Err(Error::InvalidParameter("need at least one step".into()));
    }
    let family = dynamics.family();
    if !family.in_support(z0) {
        return Err(Error::Support("initial state outside the state support".into()));
    }
    let mut latents = DMatrix::zeros(steps, dynamics.dim());
    let mut ys = DMatrix::zeros(steps, obs.obs_dim());
    let mut z = z0.clone();
    for t in 0..steps {
        z = dynamics.conditional_sample(&z, rng)?;
        if !family.in_support(&z) {
            return Err(Error::Support(format!("state left the support at step {t}")));
        }
        let y = obs.sample_obs(&z, rng)?;
        latents.row_mut(t).copy_from(&z.transpose());
        ys.row_mut(t).copy_from(&y.transpose());
    }
    Ok((latents, ys))
}

fn normal_matrix(rows: usize, cols: usize, sd: f64, rng: &mut FilterRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| sd * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn rotation(angle: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()])
}

/// Poisson readout with unit-direction loadings of random length in [lo, hi] and log baseline
/// rates near `log_rate`.
fn poisson_readout(n: usize, l: usize, lo: f64, hi: f64, log_rate: f64, dt: f64, rng: &mut FilterRng) -> Result<ObservationModel> {
    let mut c = normal_matrix(n, l, 1.0, rng);
    for mut row in c.row_iter_mut() {
        let len: f64 = rng.random_range(lo..hi);
        let norm = row.norm().max(1e-12);
        row *= len / norm;
    }
    let b = DVector::from_fn(n, |_, _| log_rate + rng.random_range(-0.5..0.5));
    ObservationModel::poisson(c, b, dt)
}

/// The true system, its readout, the initial state and the burn-in used for a named experiment.
pub fn build_system(
    system: System,
    latent_dim: Option<usize>,
    obs_dim: Option<usize>,
    rng: &mut FilterRng,
) -> Result<(DynamicsModel, ObservationModel, DVector<f64>, f64, usize)> {
    let fixed_dim = |l: usize| -> Result<usize> {
        match latent_dim {
            Some(d) if d != l => Err(Error::InvalidParameter(format!("{} has L = {l}", system.name()))),
            _ => Ok(l),
        }
    };
    Ok(match system {
        System::Crnn => {
            let l = latent_dim.unwrap_or(2);
            if l == 0 {
                return Err(Error::InvalidParameter("L must be at least 1".into()));
            }
            let n = obs_dim.unwrap_or(2 * l);
            let w = normal_matrix(l, l, 1.0 / (l as f64).sqrt(), rng);
            let dynamics = DynamicsModel::builtin_crnn(
                l,
                CRNN_GAMMA,
                w,
                CRNN_DT,
                CRNN_TAU,
                DMatrix::identity(l, l) * CRNN_NOISE,
            )?;
            let scale = (2.0 / l as f64).sqrt();
            let c = DMatrix::from_fn(n, l, |_, _| scale * rng.random_range(-1.0..1.0));
            let obs = ObservationModel::poisson(c, DVector::from_element(n, CRNN_BASE_COUNT.ln()), 1.0)?;
            let z0 = DVector::from_fn(l, |_, _| Distribution::<f64>::sample(&StandardNormal, rng));
            (dynamics, obs, z0, CRNN_DT, 0)
        }
        System::VdpPoisson | System::VdpGaussian => {
            let l = fixed_dim(2)?;
            let dynamics = DynamicsModel::builtin_vdp(VDP_TAU, VDP_TAU, VDP_GAMMA, VDP_DT, VDP_SIGMA)?;
            let obs = if system == System::VdpPoisson {
                poisson_readout(obs_dim.unwrap_or(50), l, 0.5, 1.0, 20f64.ln(), VDP_DT, rng)?
            } else {
                let n = obs_dim.unwrap_or(10);
                ObservationModel::gaussian(normal_matrix(n, l, 1.0, rng), DVector::zeros(n), DVector::from_element(n, 0.1))?
            };
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let z0 = DVector::from_vec(vec![2.0 * angle.cos(), 2.0 * angle.sin()]);
            (dynamics, obs, z0, VDP_DT, VDP_BURN_IN)
        }
        System::Cb => {
            let l = fixed_dim(2)?;
            let n = obs_dim.unwrap_or(10);
            // natural parameters 8·R(π/4)(z − ½): in mean the state circulates around the centre
            let w = rotation(PI / 4.0) * 8.0;
            let bias = -(&w * DVector::from_element(2, 0.5));
            let dynamics = DynamicsModel::mlp_cb(Mlp::affine(w, bias, Activation::Identity)?)?;
            let obs = ObservationModel::gaussian(normal_matrix(n, l, 1.0, rng), DVector::zeros(n), DVector::from_element(n, 0.1))?;
            (dynamics, obs, DVector::from_element(l, 0.5), 1.0, 100)
        }
        System::Gamma => {
            let l = fixed_dim(2)?;
            let n = obs_dim.unwrap_or(20);
            // softplus(W z + c) with a slowly decaying rotation about (3, 3)
            let w = rotation(0.15) * 0.97;
            let centre = DVector::from_element(2, GAMMA_CENTER);
            let target = (GAMMA_CENTER.exp() - 1.0).ln();
            let bias = DVector::from_element(2, target) - &w * &centre;
            debug_assert!((softplus(target) - GAMMA_CENTER).abs() < 1e-12);
            let dynamics = DynamicsModel::mlp_gamma(Mlp::affine(w, bias, Activation::Softplus)?, GAMMA_B0)?;
            let obs = poisson_readout(n, l, 0.2, 0.6, 4.0 - 1.0, 0.1, rng)?;
            (dynamics, obs, centre, 0.1, 100)
        }
        System::Lgssm => {
            let l = latent_dim.unwrap_or(2);
            let n = obs_dim.unwrap_or(2 * l);
            let raw = normal_matrix(l, l, 1.0, rng);
            let radius = raw.clone().complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
            let a = raw * (0.95 / radius.max(1e-12));
            let dynamics = DynamicsModel::linear_gaussian(a, DMatrix::identity(l, l) * 0.1)?;
            let obs = ObservationModel::gaussian(normal_matrix(n, l, 1.0, rng), DVector::zeros(n), DVector::from_element(n, 0.5))?;
            (dynamics, obs, DVector::zeros(l), 1.0, 0)
        }
    })
}

/// Builds the named system from `seed` and simulates `steps` observations after its burn-in.
pub fn make_experiment(spec: &ExperimentSpec) -> Result<Trajectory> {
    let mut root = seeded(spec.seed);
    let mut param_rng = split(&mut root);
    let mut sim_rng = split(&mut root);
    let (dynamics, obs, z_init, dt, burn_in) =
        build_system(spec.system, spec.latent_dim, spec.obs_dim, &mut param_rng)?;
    let mut z0 = z_init;
    for _ in 0..burn_in {
        z0 = dynamics.conditional_sample(&z0, &mut sim_rng)?;
    }
    let (latents, observations) = simulate(&dynamics, &obs, &z0, spec.steps, &mut sim_rng)?;
    Ok(Trajectory {
        latents,
        observations,
        meta: TrajectoryMeta {
            system: spec.system.name().into(),
            seed: spec.seed,
            dt,
            burn_in,
            z0: z0.as_slice().to_vec(),
            dynamics,
            observations: obs,
            config_hash: None,
        },
    })
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observation(&self, t: usize) -> DVector<f64> {
        self.observations.row(t).transpose()
    }

    pub fn to_csv(&self) -> String {
        let (l, n) = (self.latents.ncols(), self.observations.ncols());
        let mut out = String::from("t");
        for i in 1..=l {
            write!(out, ",z{i}").unwrap();
        }
        for i in 1..=n {
            write!(out, ",y{i}").unwrap();
        }
        out.push('\n');
        for t in 0..self.len() {
            write!(out, "{}", t + 1).unwrap();
            for v in self.latents.row(t).iter().chain(self.observations.row(t).iter()) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Trajectory::to_csv`] output. Lines starting with `#` are skipped.
    pub fn from_csv(text: &str, meta: TrajectoryMeta) -> Result<Self> {
        let mut lines = text.lines().filter(|line| !line.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Serialization("empty trajectory file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let l = cols.iter().filter(|c| c.starts_with('z')).count();
        let n = cols.iter().filter(|c| c.starts_with('y')).count();
        if cols.first() != Some(&"t") || 1 + l + n != cols.len() {
            return Err(Error::Serialization(format!("unexpected trajectory header '{header}'")));
        }
        let mut z = Vec::new();
        let mut y = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let values = line
                .split(',')
                .skip(1)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Serialization(format!("line {}: {e}", i + 2)))?;
            if values.len() != l + n {
                return Err(Error::Serialization(format!("line {} has {} values", i + 2, values.len() + 1)));
            }
            z.extend_from_slice(&values[..l]);
            y.extend_from_slice(&values[l..]);
            rows += 1;
        }
        Ok(Self {
            latents: DMatrix::from_row_slice(rows, l, &z),
            observations: DMatrix::from_row_slice(rows, n, &y),
            meta,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.meta.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let io = |e: std::io::Error| Error::Serialization(e.to_string());
        fs::create_dir_all(dir).map_err(io)?;
        let csv = dir.join(format!("{stem}.csv"));
        let meta = dir.join(format!("{stem}.meta.json"));
        fs::write(&csv, self.to_csv()).map_err(io)?;
        fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(io)?;
        Ok((csv, meta))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let io = |e: std::io::Error| Error::Serialization(e.to_string());
        let meta: TrajectoryMeta =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.meta.json"))).map_err(io)?)?;
        Self::from_csv(&fs::read_to_string(dir.join(format!("{stem}.csv"))).map_err(io)?, meta)
    }
}

/// A fresh trainable model of the same family as the true system.
pub fn default_learner(system: System, latent_dim: usize, gaussian_noise: f64, rng: &mut FilterRng) -> Result<DynamicsModel> {
    let l = latent_dim;
    match system {
        System::Cb => DynamicsModel::mlp_cb(Mlp::new(&[l, 32, l], Activation::Silu, Activation::Identity, rng)?),
        System::Gamma => DynamicsModel::mlp_gamma(Mlp::new(&[l, 64, l], Activation::Silu, Activation::Softplus, rng)?, GAMMA_B0),
        _ => DynamicsModel::mlp_gaussian(
            Mlp::new(&[l, 32, l], Activation::Silu, Activation::Identity, rng)?,
            true,
            GaussianNoise::fixed(DMatrix::identity(l, l) * gaussian_noise),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_dimension_systems_reject_other_sizes() {
        let mut rng = seeded(0);
        for system in [System::VdpPoisson, System::VdpGaussian, System::Cb, System::Gamma] {
            assert!(build_system(system, Some(3), None, &mut rng).is_err());
            assert!(build_system(system, Some(2), None, &mut rng).is_ok());
        }
        assert!(build_system(System::Crnn, Some(0), None, &mut rng).is_err());
    }

    #[test]
    fn zero_steps_and_out_of_support_starts_fail() {
        let mut rng = seeded(1);
        let (dynamics, obs, z0, _, _) = build_system(System::Cb, None, None, &mut rng).unwrap();
        assert!(simulate(&dynamics, &obs, &z0, 0, &mut rng).is_err());
        let outside = DVector::from_element(2, 1.5);
        assert!(matches!(simulate(&dynamics, &obs, &outside, 5, &mut rng), Err(Error::Support(_))));
    }

    #[test]
    fn lgssm_transition_is_stable() {
        let (dynamics, ..) = build_system(System::Lgssm, Some(4), None, &mut seeded(2)).unwrap();
        let DynamicsModel::LinearGaussian { a, .. } = dynamics else { panic!("expected a linear model") };
        let radius = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        assert!((radius - 0.95).abs() < 1e-9);
    }
}
