//! Fully connected networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (fan-in x fan-out, row-major) followed by its bias.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => f64::from(u8::from(z > 0.0)),
            Self::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

/// Hidden layer widths, activation and initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Input width, hidden widths, output width.
    pub dims: Vec<usize>,
    pub activation: Activation,
    /// Whether the last layer is followed by the activation.
    pub activate_output: bool,
}

/// Values kept by the forward pass for the backward pass.
pub struct Trace {
    /// Layer inputs; `inputs[0]` is the network input.
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of every layer.
    pub pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Mlp {
    pub fn new(dims: Vec<usize>, activation: Activation, activate_output: bool) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer dimensions {dims:?}")));
        }
        Ok(Self {
            dims,
            activation,
            activate_output,
        })
    }

    /// A network with the spec's hidden layers between `input` and `output`.
    pub fn from_spec(spec: &MlpSpec, input: usize, output: usize) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend(&spec.layer_widths);
        dims.push(output);
        Self::new(dims, spec.activation, false)
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    fn offset(&self, layer: usize) -> usize {
        (0..layer).map(|l| (self.dims[l] + 1) * self.dims[l + 1]).sum()
    }

    pub fn n_params(&self) -> usize {
        self.offset(self.layers())
    }

    /// Gaussian weights with variance `2 / fan_in` (`1 / fan_in` on a linear
    /// output layer) and zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let gain = if l + 1 == self.layers() && !self.activate_output { 1.0 } else { 2.0 };
            let sd = (gain / fan_in as f64).sqrt();
            p.extend((0..fan_in * fan_out).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
            p.extend(std::iter::repeat_n(0.0, fan_out));
        }
        p
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers() || self.activate_output
    }

    fn weights<'a>(&self, params: &'a [f64], layer: usize) -> (DMatrix<f64>, &'a [f64]) {
        let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer);
        let w = DMatrix::from_row_slice(fan_in, fan_out, &params[off..off + fan_in * fan_out]);
        (w, &params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out])
    }

    pub fn check(&self, params: &[f64], x: &DMatrix<f64>) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.n_params()
            )));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers());
        let mut a = x.clone();
        for l in 0..self.layers() {
            let (w, b) = self.weights(params, l);
            let mut z = &a * w;
            for mut row in z.row_iter_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            let next = if self.activated(l) {
                z.map(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Trace { inputs, pre, output: a }
    }

    /// Adds the parameter gradient for upstream gradient `grad_out` into
    /// `grads` and returns the gradient with respect to the input.
    pub fn backward(&self, params: &[f64], trace: &Trace, grad_out: &DMatrix<f64>, grads: &mut [f64]) -> DMatrix<f64> {
        let mut g = grad_out.clone();
        for l in (0..self.layers()).rev() {
            if self.activated(l) {
                let z = &trace.pre[l];
                g.zip_apply(z, |gv, zv| *gv *= self.activation.derivative(zv));
            }
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = self.offset(l);
            let dw = trace.inputs[l].transpose() * &g;
            for i in 0..fan_in {
                for j in 0..fan_out {
                    grads[off + i * fan_out + j] += dw[(i, j)];
                }
            }
            for j in 0..fan_out {
                grads[off + fan_in * fan_out + j] += g.column(j).sum();
            }
            let (w, _) = self.weights(params, l);
            g = &g * w.transpose();
        }
        g
    }
}

/// Outputs, loss `sum_k (out - y)^2 / (2 m)` over `m` rows, and its gradient.
pub fn mlp_forward_backward(
    mlp: &Mlp,
    params: &[f64],
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64, Vec<f64>)> {
    mlp.check(params, x)?;
    if y.nrows() != x.nrows() || y.ncols() != mlp.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "targets are {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            x.nrows(),
            mlp.output_dim()
        )));
    }
    let m = x.nrows() as f64;
    let trace = mlp.forward(params, x);
    let resid = &trace.output - y;
    let loss = resid.norm_squared() / (2.0 * m);
    let mut grads = vec![0.0; params.len()];
    mlp.backward(params, &trace, &(resid / m), &mut grads);
    Ok((trace.output, loss, grads))
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * grads[k];
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * grads[k] * grads[k];
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}
