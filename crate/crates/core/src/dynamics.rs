//! Conditional transition models p_θ(z_t | z_{t−1}) given by a natural-parameter map.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{gaussian, Family, NaturalParams};
use crate::nn::{Activation, Mlp};
use crate::rng::FilterRng;

/// Inputs to continuous Bernoulli nets are clamped into [ε, 1 − ε].
pub const CB_INPUT_CLAMP: f64 = 1e-6;
/// Inputs to Gamma nets are clamped to at least this value.
pub const GAMMA_INPUT_FLOOR: f64 = 1e-6;
const GAMMA_MEAN_FLOOR: f64 = 1e-6;
const GAMMA_SHAPE_FLOOR: f64 = 1e-7;

/// Hand-specified drift maps with analytic Jacobians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum MeanMap {
    /// z + (Δ/τ)(γ W tanh(z) − z)
    Crnn { gamma: f64, w: DMatrix<f64>, dt_over_tau: f64 },
    /// Euler-discretized Van der Pol oscillator.
    VanDerPol { gamma: f64, dt_over_tau1: f64, dt_over_tau2: f64 },
}

impl MeanMap {
    pub fn dim(&self) -> usize {
        match self {
            MeanMap::Crnn { w, .. } => w.nrows(),
            MeanMap::VanDerPol { .. } => 2,
        }
    }

    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            MeanMap::Crnn { gamma, w, dt_over_tau } => {
                let drive = w * z.map(f64::tanh) * *gamma - z;
                z + drive * *dt_over_tau
            }
            MeanMap::VanDerPol { gamma, dt_over_tau1, dt_over_tau2 } => {
                let (z1, z2) = (z[0], z[1]);
                DVector::from_vec(vec![
                    z1 + dt_over_tau1 * z2,
                    z2 + dt_over_tau2 * (gamma * (1.0 - z1 * z1) * z2 - z1),
                ])
            }
        }
    }

    pub fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        match self {
            MeanMap::Crnn { gamma, w, dt_over_tau } => {
                let l = z.len();
                let sech2 = z.map(|v| 1.0 - v.tanh().powi(2));
                let mut inner = w * DMatrix::from_diagonal(&sech2) * *gamma;
                for i in 0..l {
                    inner[(i, i)] -= 1.0;
                }
                DMatrix::identity(l, l) + inner * *dt_over_tau
            }
            MeanMap::VanDerPol { gamma, dt_over_tau1, dt_over_tau2 } => {
                let (z1, z2) = (z[0], z[1]);
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        1.0,
                        *dt_over_tau1,
                        dt_over_tau2 * (-2.0 * gamma * z1 * z2 - 1.0),
                        1.0 + dt_over_tau2 * gamma * (1.0 - z1 * z1),
                    ],
                )
            }
        }
    }
}

/// Gaussian state noise. With `learn_diagonal` the log-variances on the diagonal
/// of `q` become trainable and `q` must be diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub q: DMatrix<f64>,
    #[serde(default)]
    pub learn_diagonal: bool,
}

impl GaussianNoise {
    pub fn fixed(q: DMatrix<f64>) -> Self {
        Self { q, learn_diagonal: false }
    }

    /// Diagonal noise whose log-variances are trained with the mean map.
    pub fn learnable_diagonal(variances: &DVector<f64>) -> Self {
        Self { q: DMatrix::from_diagonal(variances), learn_diagonal: true }
    }

    fn validate(&self, l: usize) -> Result<()> {
        if self.q.shape() != (l, l) {
            return Err(Error::ShapeMismatch("state noise must be L×L".into()));
        }
        if gaussian::strict_cholesky(&self.q).is_none()
            || (self.q.clone() - self.q.transpose()).amax() > 1e-12 * self.q.amax().max(1.0)
        {
            return Err(Error::InvalidParameter(
                "state noise covariance must be symmetric positive definite".into(),
            ));
        }
        if self.learn_diagonal {
            let off = self.q.clone() - DMatrix::from_diagonal(&self.q.diagonal());
            if off.amax() > 0.0 {
                return Err(Error::InvalidParameter(
                    "learnable state noise must be diagonal".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsModel {
    /// N(Az, Q); `trainable` exposes A to learning.
    LinearGaussian {
        a: DMatrix<f64>,
        noise: GaussianNoise,
        #[serde(default)]
        trainable: bool,
    },
    /// N(f(z), Q) with f a network, or z + net(z) when `residual`.
    MlpGaussian { net: Mlp, residual: bool, noise: GaussianNoise },
    /// N(map(z), Q) with a fixed analytic drift.
    FixedGaussian { map: MeanMap, noise: GaussianNoise },
    /// Factorized CB with natural parameters net(z).
    MlpCb { net: Mlp },
    /// Factorized Gamma(b₀f(z)², b₀f(z)), so E[z'] = f(z) and Var[z'] = 1/b₀.
    MlpGamma { net: Mlp, b0: f64 },
}

struct GaussianView {
    q_inv: DMatrix<f64>,
}

impl DynamicsModel {
    pub fn linear_gaussian(a: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let m = DynamicsModel::LinearGaussian { a, noise: GaussianNoise::fixed(q), trainable: false };
        m.validate()?;
        Ok(m)
    }

    pub fn mlp_gaussian(net: Mlp, residual: bool, noise: GaussianNoise) -> Result<Self> {
        let m = DynamicsModel::MlpGaussian { net, residual, noise };
        m.validate()?;
        Ok(m)
    }

    pub fn mlp_cb(net: Mlp) -> Result<Self> {
        let m = DynamicsModel::MlpCb { net };
        m.validate()?;
        Ok(m)
    }

    pub fn mlp_gamma(net: Mlp, b0: f64) -> Result<Self> {
        let m = DynamicsModel::MlpGamma { net, b0 };
        m.validate()?;
        Ok(m)
    }

    /// Chaotic RNN: N(z + (Δ/τ)(γ W tanh(z) − z), Q).
    pub fn builtin_crnn(
        dim: usize,
        gamma: f64,
        w: DMatrix<f64>,
        dt: f64,
        tau: f64,
        q: DMatrix<f64>,
    ) -> Result<Self> {
        if dim == 0 || w.shape() != (dim, dim) {
            return Err(Error::ShapeMismatch("CRNN weight must be L×L with L ≥ 1".into()));
        }
        if !(dt > 0.0 && tau > 0.0) {
            return Err(Error::InvalidParameter("CRNN Δ and τ must be positive".into()));
        }
        let m = DynamicsModel::FixedGaussian {
            map: MeanMap::Crnn { gamma, w, dt_over_tau: dt / tau },
            noise: GaussianNoise::fixed(q),
        };
        m.validate()?;
        Ok(m)
    }

    /// Noisy Van der Pol oscillator with Q = σ²I.
    pub fn builtin_vdp(tau1: f64, tau2: f64, gamma: f64, dt: f64, sigma: f64) -> Result<Self> {
        if !(tau1 > 0.0 && tau2 > 0.0 && dt > 0.0 && gamma > 0.0) {
            return Err(Error::InvalidParameter("Van der Pol parameters must be positive".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(
                "Van der Pol noise σ must be positive (Q must be SPD)".into(),
            ));
        }
        let m = DynamicsModel::FixedGaussian {
            map: MeanMap::VanDerPol { gamma, dt_over_tau1: dt / tau1, dt_over_tau2: dt / tau2 },
            noise: GaussianNoise::fixed(DMatrix::identity(2, 2) * (sigma * sigma)),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.dim();
        if l == 0 {
            return Err(Error::InvalidParameter("latent dimension must be ≥ 1".into()));
        }
        match self {
            DynamicsModel::LinearGaussian { a, noise, .. } => {
                if a.shape() != (l, l) {
                    return Err(Error::ShapeMismatch("A must be square".into()));
                }
                noise.validate(l)
            }
            DynamicsModel::MlpGaussian { net, noise, .. } => {
                if net.in_dim() != net.out_dim() {
                    return Err(Error::ShapeMismatch("gaussian mean net must map L → L".into()));
                }
                noise.validate(l)
            }
            DynamicsModel::FixedGaussian { noise, .. } => noise.validate(l),
            DynamicsModel::MlpCb { net } => {
                if net.in_dim() != net.out_dim() {
                    return Err(Error::ShapeMismatch("CB net must map L → L".into()));
                }
                Ok(())
            }
            DynamicsModel::MlpGamma { net, b0 } => {
                if net.in_dim() != net.out_dim() {
                    return Err(Error::ShapeMismatch("gamma net must map L → L".into()));
                }
                if net.output_activation() != Activation::Softplus {
                    return Err(Error::InvalidParameter("gamma net needs a softplus output".into()));
                }
                if !(*b0 > 0.0) {
                    return Err(Error::InvalidParameter("b₀ must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DynamicsModel::LinearGaussian { a, .. } => a.nrows(),
            DynamicsModel::MlpGaussian { net, .. }
            | DynamicsModel::MlpCb { net }
            | DynamicsModel::MlpGamma { net, .. } => net.out_dim(),
            DynamicsModel::FixedGaussian { map, .. } => map.dim(),
        }
    }

    pub fn family(&self) -> Family {
        let l = self.dim();
        match self {
            DynamicsModel::LinearGaussian { .. }
            | DynamicsModel::MlpGaussian { .. }
            | DynamicsModel::FixedGaussian { .. } => Family::GaussianDense(l),
            DynamicsModel::MlpCb { .. } => Family::ContinuousBernoulli(l),
            DynamicsModel::MlpGamma { .. } => Family::Gamma(l),
        }
    }

    /// State noise for the Gaussian kinds.
    pub fn noise(&self) -> Option<&GaussianNoise> {
        match self {
            DynamicsModel::LinearGaussian { noise, .. }
            | DynamicsModel::MlpGaussian { noise, .. }
            | DynamicsModel::FixedGaussian { noise, .. } => Some(noise),
            _ => None,
        }
    }

    fn gaussian_view(&self) -> Result<Option<GaussianView>> {
        match self.noise() {
            Some(noise) => Ok(Some(GaussianView { q_inv: gaussian::spd_inverse(&noise.q)? })),
            None => Ok(None),
        }
    }

    fn prepare_input(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.dim();
        if z.len() != l {
            return Err(Error::ShapeMismatch(format!("state has length {}, expected {l}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Support("non-finite state".into()));
        }
        match self {
            DynamicsModel::MlpCb { .. } => {
                if z.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
                    return Err(Error::Support(format!("CB dynamics input {z:?} outside [0,1]")));
                }
                Ok(z.map(|v| v.clamp(CB_INPUT_CLAMP, 1.0 - CB_INPUT_CLAMP)))
            }
            DynamicsModel::MlpGamma { .. } => {
                if z.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Support(format!("gamma dynamics input {z:?} not positive")));
                }
                Ok(z.map(|v| v.max(GAMMA_INPUT_FLOOR)))
            }
            _ => Ok(z.clone()),
        }
    }

    /// Conditional mean E[z_t | z_{t−1} = z].
    pub fn conditional_mean(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.prepare_input(z)?;
        match self {
            DynamicsModel::LinearGaussian { a, .. } => Ok(a * x),
            DynamicsModel::MlpGaussian { net, residual, .. } => {
                let f = net.forward(&x)?;
                Ok(if *residual { f + x } else { f })
            }
            DynamicsModel::FixedGaussian { map, .. } => Ok(map.apply(&x)),
            DynamicsModel::MlpCb { net } => Ok(net.forward(&x)?.map(crate::expfam::cb::mean)),
            DynamicsModel::MlpGamma { net, .. } => Ok(net.forward(&x)?.map(|f| f.max(GAMMA_MEAN_FLOOR))),
        }
    }

    /// Jacobian of the conditional mean for the Gaussian and Gamma kinds.
    pub fn mean_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x = self.prepare_input(z)?;
        let l = self.dim();
        match self {
            DynamicsModel::LinearGaussian { a, .. } => Ok(a.clone()),
            DynamicsModel::MlpGaussian { net, residual, .. } => {
                let j = net.input_jacobian(&x)?;
                Ok(if *residual { j + DMatrix::identity(l, l) } else { j })
            }
            DynamicsModel::FixedGaussian { map, .. } => Ok(map.jacobian(&x)),
            DynamicsModel::MlpGamma { net, .. } => net.input_jacobian(&x),
            DynamicsModel::MlpCb { .. } => Err(Error::FamilyMismatch {
                expected: "gaussian or gamma dynamics".into(),
                got: self.family().to_string(),
            }),
        }
    }

    fn lambda_with(&self, view: Option<&GaussianView>, z: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.dim();
        match self {
            DynamicsModel::LinearGaussian { .. }
            | DynamicsModel::MlpGaussian { .. }
            | DynamicsModel::FixedGaussian { .. } => {
                let view = view.expect("gaussian view");
                let mean = self.conditional_mean(z)?;
                let mut lambda = DVector::zeros(l + l * l);
                lambda.rows_mut(0, l).copy_from(&(&view.q_inv * mean));
                lambda.rows_mut(l, l * l).copy_from_slice((&view.q_inv * -0.5).as_slice());
                Ok(lambda)
            }
            DynamicsModel::MlpCb { net } => net.forward(&self.prepare_input(z)?),
            DynamicsModel::MlpGamma { net, b0 } => {
                let f = net.forward(&self.prepare_input(z)?)?;
                let mut lambda = DVector::zeros(2 * l);
                for i in 0..l {
                    let fi = f[i].max(GAMMA_MEAN_FLOOR);
                    lambda[i] = (b0 * fi * fi).max(GAMMA_SHAPE_FLOOR) - 1.0;
                    lambda[l + i] = -b0 * fi;
                }
                Ok(lambda)
            }
        }
    }

    /// λ_θ(z), the natural parameters of p_θ(· | z).
    pub fn natural_map(&self, z: &DVector<f64>) -> Result<NaturalParams> {
        let view = self.gaussian_view()?;
        NaturalParams::new(self.family(), self.lambda_with(view.as_ref(), z)?)
    }

    /// Raw λ_θ vectors for each row of `zs`, sharing one factorization of Q.
    pub fn natural_map_rows(&self, zs: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        let view = self.gaussian_view()?;
        zs.row_iter()
            .map(|r| self.lambda_with(view.as_ref(), &r.transpose()))
            .collect()
    }

    pub fn conditional_sample(&self, z: &DVector<f64>, rng: &mut FilterRng) -> Result<DVector<f64>> {
        let zs = DMatrix::from_row_slice(1, z.len(), z.as_slice());
        Ok(self.sample_rows(&zs, rng)?.row(0).transpose())
    }

    /// One transition draw for every row of `zs`.
    pub fn sample_rows(&self, zs: &DMatrix<f64>, rng: &mut FilterRng) -> Result<DMatrix<f64>> {
        let l = self.dim();
        let mut out = DMatrix::zeros(zs.nrows(), l);
        if let Some(noise) = self.noise() {
            let chol = gaussian::cholesky(&noise.q)
                .ok_or_else(|| Error::Numeric("state noise factorization failed".into()))?;
            let lower = chol.l();
            for (r, row) in zs.row_iter().enumerate() {
                let mean = self.conditional_mean(&row.transpose())?;
                let eps = DVector::from_fn(l, |_, _| StandardNormal.sample(rng));
                out.row_mut(r).copy_from(&(mean + &lower * eps).transpose());
            }
        } else {
            for (r, row) in zs.row_iter().enumerate() {
                let p = self.natural_map(&row.transpose())?;
                out.row_mut(r).copy_from(&p.sample(1, rng)?.row(0));
            }
        }
        Ok(out)
    }

    /// KL(p_self(· | z) ‖ p_other(· | z)).
    pub fn conditional_kl(&self, other: &DynamicsModel, z: &DVector<f64>) -> Result<f64> {
        crate::expfam::ensure_same(self.family(), other.family())?;
        self.natural_map(z)?.kl(&other.natural_map(z)?)
    }

    /// Number of trainable parameters.
    pub fn num_params(&self) -> usize {
        let l = self.dim();
        let noise_params = |n: &GaussianNoise| if n.learn_diagonal { l } else { 0 };
        match self {
            DynamicsModel::LinearGaussian { noise, trainable, .. } => {
                (if *trainable { l * l } else { 0 }) + noise_params(noise)
            }
            DynamicsModel::MlpGaussian { net, noise, .. } => net.num_params() + noise_params(noise),
            DynamicsModel::FixedGaussian { noise, .. } => noise_params(noise),
            DynamicsModel::MlpCb { net } | DynamicsModel::MlpGamma { net, .. } => net.num_params(),
        }
    }

    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            DynamicsModel::LinearGaussian { a, trainable, .. } if *trainable => {
                out.extend_from_slice(a.as_slice())
            }
            DynamicsModel::MlpGaussian { net, .. }
            | DynamicsModel::MlpCb { net }
            | DynamicsModel::MlpGamma { net, .. } => out.extend_from_slice(net.params().as_slice()),
            _ => {}
        }
        if let Some(n) = self.noise().filter(|n| n.learn_diagonal) {
            out.extend(n.q.diagonal().iter().map(|v| v.ln()));
        }
        DVector::from_vec(out)
    }

    pub fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} dynamics parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let l = self.dim();
        let mut k = 0;
        match self {
            DynamicsModel::LinearGaussian { a, trainable, .. } if *trainable => {
                a.as_mut_slice().copy_from_slice(&p.as_slice()[..l * l]);
                k = l * l;
            }
            DynamicsModel::MlpGaussian { net, .. }
            | DynamicsModel::MlpCb { net }
            | DynamicsModel::MlpGamma { net, .. } => {
                k = net.num_params();
                net.set_params(&p.rows(0, k).into_owned())?;
            }
            _ => {}
        }
        let noise = match self {
            DynamicsModel::LinearGaussian { noise, .. }
            | DynamicsModel::MlpGaussian { noise, .. }
            | DynamicsModel::FixedGaussian { noise, .. } => Some(noise),
            _ => None,
        };
        if let Some(n) = noise.filter(|n| n.learn_diagonal) {
            for i in 0..l {
                n.q[(i, i)] = p[k + i].exp();
            }
        }
        Ok(())
    }

    /// Gradient with respect to the trainable parameters of `upstreamᵀ λ_θ(z)`.
    pub fn natural_map_vjp(&self, z: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.dim();
        if upstream.len() != self.family().stat_dim() {
            return Err(Error::ShapeMismatch("upstream must match the natural parameter length".into()));
        }
        let x = self.prepare_input(z)?;
        let mut out: Vec<f64> = Vec::with_capacity(self.num_params());
        if let Some(noise) = self.noise() {
            let q_inv = gaussian::spd_inverse(&noise.q)?;
            let u1 = upstream.rows(0, l).into_owned();
            let g_mean = &q_inv * &u1;
            match self {
                DynamicsModel::LinearGaussian { trainable: true, .. } => {
                    out.extend_from_slice((&g_mean * x.transpose()).as_slice())
                }
                DynamicsModel::MlpGaussian { net, .. } => {
                    out.extend_from_slice(net.backward(&x, &g_mean)?.flatten().as_slice())
                }
                _ => {}
            }
            if noise.learn_diagonal {
                let mean = self.conditional_mean(&x)?;
                for i in 0..l {
                    let inv = q_inv[(i, i)];
                    out.push(-inv * u1[i] * mean[i] + 0.5 * inv * upstream[l + i * l + i]);
                }
            }
        } else {
            match self {
                DynamicsModel::MlpCb { net } => {
                    out.extend_from_slice(net.backward(&x, upstream)?.flatten().as_slice())
                }
                DynamicsModel::MlpGamma { net, b0 } => {
                    let f = net.forward(&x)?;
                    let g = DVector::from_fn(l, |i, _| {
                        let fi = f[i];
                        let shape_active = fi > GAMMA_MEAN_FLOOR && b0 * fi * fi > GAMMA_SHAPE_FLOOR;
                        let d_shape = if shape_active { 2.0 * b0 * fi } else { 0.0 };
                        let d_rate = if fi > GAMMA_MEAN_FLOOR { -b0 } else { 0.0 };
                        upstream[i] * d_shape + upstream[l + i] * d_rate
                    });
                    out.extend_from_slice(net.backward(&x, &g)?.flatten().as_slice())
                }
                _ => unreachable!(),
            }
        }
        Ok(DVector::from_vec(out))
    }
}
