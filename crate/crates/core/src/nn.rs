//! Small dense networks with hand-written backpropagation, and Adam.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::special::{sigmoid, softplus};
use crate::rng::FilterRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Silu,
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// out × in
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Fully connected network; `hidden` is applied after every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpSnapshot", try_from = "MlpSnapshot")]
pub struct Mlp {
    layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

/// Flat JSON form: a shape header plus all parameters in `params()` order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub shapes: Vec<(usize, usize)>,
    pub hidden: Activation,
    pub output: Activation,
    pub params: Vec<f64>,
}

impl From<Mlp> for MlpSnapshot {
    fn from(net: Mlp) -> Self {
        MlpSnapshot {
            shapes: net.layers.iter().map(|l| l.weight.shape()).collect(),
            hidden: net.hidden,
            output: net.output,
            params: net.params().as_slice().to_vec(),
        }
    }
}

impl TryFrom<MlpSnapshot> for Mlp {
    type Error = Error;

    fn try_from(s: MlpSnapshot) -> Result<Self> {
        let layers = s
            .shapes
            .iter()
            .map(|&(o, i)| Layer {
                weight: DMatrix::zeros(o, i),
                bias: DVector::zeros(o),
            })
            .collect();
        let mut net = Mlp::from_layers(layers, s.hidden, s.output)?;
        net.set_params(&DVector::from_vec(s.params))?;
        Ok(net)
    }
}

/// Parameter gradient in the same layout as the network.
#[derive(Clone, Debug)]
pub struct MlpGrad {
    pub layers: Vec<Layer>,
    pub input: DVector<f64>,
}

impl MlpGrad {
    pub fn flatten(&self) -> DVector<f64> {
        let n = self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        let mut out = DVector::zeros(n);
        let mut k = 0;
        for l in &self.layers {
            out.rows_mut(k, l.weight.len()).copy_from_slice(l.weight.as_slice());
            k += l.weight.len();
            out.rows_mut(k, l.bias.len()).copy_from(&l.bias);
            k += l.bias.len();
        }
        out
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].weight.nrows() != w[1].weight.ncols() {
                return Err(Error::ShapeMismatch("consecutive layer shapes do not chain".into()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::ShapeMismatch("bias length differs from layer width".into()));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite network parameter".into()));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut FilterRng,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::ShapeMismatch("need input and output sizes".into()));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self::from_layers(layers, hidden, output)
    }

    /// A single affine layer `x ↦ Wx + b` followed by `output`.
    pub fn affine(weight: DMatrix<f64>, bias: DVector<f64>, output: Activation) -> Result<Self> {
        Self::from_layers(vec![Layer { weight, bias }], Activation::Silu, output)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_params());
        let mut k = 0;
        for l in &self.layers {
            out.rows_mut(k, l.weight.len()).copy_from_slice(l.weight.as_slice());
            k += l.weight.len();
            out.rows_mut(k, l.bias.len()).copy_from(&l.bias);
            k += l.bias.len();
        }
        out
    }

    pub fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&p.as_slice()[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p.as_slice()[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "network input has length {}, expected {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            h = (&l.weight * &h + &l.bias).map(|v| act.apply(v));
        }
        Ok(h)
    }

    /// Inputs to each layer and the pre-activations.
    fn trace(&self, x: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let a = &l.weight * &h + &l.bias;
            let act = self.activation(i);
            let next = a.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        (inputs, pre)
    }

    /// Reverse-mode gradient of `upstreamᵀ forward(x)`.
    pub fn backward(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> Result<MlpGrad> {
        self.check_input(x)?;
        if upstream.len() != self.out_dim() {
            return Err(Error::ShapeMismatch("upstream gradient length differs from output".into()));
        }
        let (inputs, pre) = self.trace(x);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation(i);
            let delta = g.component_mul(&pre[i].map(|v| act.derivative(v)));
            grads.push(Layer {
                weight: &delta * inputs[i].transpose(),
                bias: delta.clone(),
            });
            g = self.layers[i].weight.transpose() * delta;
        }
        grads.reverse();
        Ok(MlpGrad {
            layers: grads,
            input: g,
        })
    }

    /// Jacobian of the output with respect to the input (out × in).
    pub fn input_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let (_, pre) = self.trace(x);
        let mut jac = DMatrix::identity(self.in_dim(), self.in_dim());
        for (i, l) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            let d = pre[i].map(|v| act.derivative(v));
            let mut next = &l.weight * jac;
            for (r, mut row) in next.row_iter_mut().enumerate() {
                row *= d[r];
            }
            jac = next;
        }
        Ok(jac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: DVector<f64>,
    pub second: DVector<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first: DVector::zeros(dim),
            second: DVector::zeros(dim),
            steps: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut DVector<f64>, grads: &DVector<f64>) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch("adam state, parameter and gradient sizes differ".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let c = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = c.beta1 * self.first[i] + (1.0 - c.beta1) * g;
            self.second[i] = c.beta2 * self.second[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first[i] / bc1;
            let v_hat = self.second[i] / bc2;
            params[i] -= c.step_size * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}
