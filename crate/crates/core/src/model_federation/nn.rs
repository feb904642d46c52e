//! Small dense networks with hand-written backpropagation.
//!
//! Parameters are one flat vector: for each layer the weight matrix
//! (`out × in`, row-major) followed by the bias. Hidden layers use `tanh`;
//! the last layer is linear, losses apply their own link.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
}

/// Activations of every layer for one input, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least the input layer")
    }
}

impl DenseNet {
    pub fn new(sizes: Vec<usize>) -> Result<Self, ModelError> {
        if sizes.len() < 2 {
            return Err(ModelError::Architecture("a network needs an input and an output layer".into()));
        }
        if sizes[1..].iter().any(|&s| s == 0) {
            return Err(ModelError::Architecture(format!("empty layer in {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform Glorot initialization; biases start at zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for w in self.sizes.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            p.extend((0..w[0] * w[1]).map(|_| rng.gen_range(-limit..limit)));
            p.extend(std::iter::repeat(0.0).take(w[1]));
        }
        p
    }

    /// Weights equal to the identity, zero bias. Only for single-layer square nets.
    pub fn identity(&self) -> Result<Vec<f64>, ModelError> {
        if self.sizes.len() != 2 || self.sizes[0] != self.sizes[1] {
            return Err(ModelError::Architecture("identity needs one square layer".into()));
        }
        let d = self.sizes[0];
        let mut p = vec![0.0; d * d + d];
        for i in 0..d {
            p[i * d + i] = 1.0;
        }
        Ok(p)
    }

    fn check(&self, params: &[f64], x: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter vector does not fit {:?}", self.sizes);
        assert_eq!(x.len(), self.inputs(), "input width does not fit {:?}", self.sizes);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Trace {
        self.check(params, x);
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let input = &acts[l];
            let mut out: Vec<f64> =
                (0..n_out).map(|o| bias[o] + weights[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>()).collect();
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        Trace { acts }
    }

    pub fn output(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward(params, x).acts.pop().unwrap()
    }

    /// Adds `∂L/∂params` into `grad` given `∂L/∂output`; returns `∂L/∂input`.
    pub fn backward(&self, params: &[f64], trace: &Trace, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &trace.acts[l];
            for o in 0..n_out {
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += delta[o] * a;
                }
                grad[off + n_in * n_out + o] += delta[o];
            }
            let weights = &params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                for (i, p) in prev.iter_mut().enumerate() {
                    *p += delta[o] * weights[o * n_in + i];
                }
            }
            if l > 0 {
                // input to this layer went through tanh
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        delta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½(o − y)²`
    Squared,
    /// Cross-entropy on the logit `o`: `log(1 + eᵒ) − y·o`.
    Logistic,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eᶻ)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Loss {
    /// Per-sample loss and its derivative with respect to the output.
    pub fn eval(self, o: f64, y: f64) -> (f64, f64) {
        match self {
            Loss::Squared => (0.5 * (o - y) * (o - y), o - y),
            Loss::Logistic => (softplus(o) - y * o, sigmoid(o) - y),
        }
    }
}
