//! Generic fully connected network on flat parameter slices.
//!
//! Both model families (the supervised verifier and the autoencoder) and the
//! GAN share this forward/backward machinery. Parameters live in a flat
//! slice laid out as `layer{i}.weight` ([out, in], row-major) followed by
//! `layer{i}.bias` ([out]) for each layer.

use crate::error::{FedverError, Result};
use crate::param::{Layout, LayoutEntry};

/// Score floor/ceiling keeping sigmoid outputs strictly inside (0,1).
pub const SIGMOID_EPS: f64 = 1e-15;

pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network: `dims[0]` inputs through `dims.last()` outputs,
/// one activation per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
}

/// Per-layer post-activation values recorded during a forward pass.
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` the output of layer l.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

impl Mlp {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(FedverError::invalid("mlp needs at least input and output dims"));
        }
        if dims.contains(&0) {
            return Err(FedverError::invalid("mlp layer dimension of zero"));
        }
        if activations.len() != dims.len() - 1 {
            return Err(FedverError::invalid(
                "mlp needs exactly one activation per layer",
            ));
        }
        Ok(Mlp { dims, activations })
    }

    /// Hidden layers tanh, configurable output activation.
    pub fn with_hidden_tanh(dims: Vec<usize>, output: Activation) -> Result<Self> {
        let n_layers = dims.len().saturating_sub(1);
        let mut activations = vec![Activation::Tanh; n_layers];
        if let Some(last) = activations.last_mut() {
            *last = output;
        }
        Mlp::new(dims, activations)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn layout(&self, prefix: &str) -> Layout {
        let mut layout = Vec::new();
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            layout.push(LayoutEntry::new(
                format!("{prefix}layer{l}.weight"),
                vec![fan_out, fan_in],
            ));
            layout.push(LayoutEntry::new(format!("{prefix}layer{l}.bias"), vec![fan_out]));
        }
        layout
    }

    pub fn param_count(&self) -> usize {
        (0..self.n_layers())
            .map(|l| self.dims[l] * self.dims[l + 1] + self.dims[l + 1])
            .sum()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(FedverError::LayoutMismatch(format!(
                "mlp expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(FedverError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass recording per-layer activations, optionally stopping
    /// after `n_layers` layers (used for encoder-prefix evaluation).
    pub fn forward_trace_prefix(
        &self,
        params: &[f64],
        x: &[f64],
        n_layers: usize,
    ) -> Result<ForwardTrace> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let weights = &params[offset..offset + fan_out * fan_in];
            let biases = &params[offset + fan_out * fan_in..offset + fan_out * fan_in + fan_out];
            offset += fan_out * fan_in + fan_out;
            let prev = activations.last().unwrap();
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let z: f64 = row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>() + biases[o];
                out.push(self.activations[l].apply(z));
            }
            activations.push(out);
        }
        Ok(ForwardTrace { activations })
    }

    pub fn forward_trace(&self, params: &[f64], x: &[f64]) -> Result<ForwardTrace> {
        self.forward_trace_prefix(params, x, self.n_layers())
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(params, x)?.output().to_vec())
    }

    /// Backpropagates `out_delta` = dL/dz at the output layer (pre-activation
    /// gradient), accumulating parameter gradients into `grad` and returning
    /// the gradient with respect to the input.
    ///
    /// Supplying dL/dz rather than dL/da lets the sigmoid/cross-entropy and
    /// linear/MSE pairings keep their numerically stable combined forms.
    pub fn accumulate_backward(
        &self,
        params: &[f64],
        trace: &ForwardTrace,
        out_delta: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if out_delta.len() != self.output_dim() {
            return Err(FedverError::DimensionMismatch {
                expected: self.output_dim(),
                actual: out_delta.len(),
            });
        }
        let mut layer_offsets = Vec::with_capacity(self.n_layers());
        let mut offset = 0;
        for l in 0..self.n_layers() {
            layer_offsets.push(offset);
            offset += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }

        let mut delta = out_delta.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let base = layer_offsets[l];
            let prev = &trace.activations[l];
            // dL/dW[o][i] = delta[o] * prev[i]; dL/db[o] = delta[o]
            for o in 0..fan_out {
                for i in 0..fan_in {
                    grad[base + o * fan_in + i] += delta[o] * prev[i];
                }
                grad[base + fan_out * fan_in + o] += delta[o];
            }
            if l == 0 {
                let weights = &params[base..base + fan_out * fan_in];
                let mut input_grad = vec![0.0; fan_in];
                for o in 0..fan_out {
                    for i in 0..fan_in {
                        input_grad[i] += weights[o * fan_in + i] * delta[o];
                    }
                }
                return Ok(input_grad);
            }
            // Propagate to layer l-1: dL/dz_{l-1} = (W^T delta) ⊙ act'(a_{l-1})
            let weights = &params[base..base + fan_out * fan_in];
            let mut next_delta = vec![0.0; fan_in];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    next_delta[i] += weights[o * fan_in + i] * delta[o];
                }
            }
            for (i, d) in next_delta.iter_mut().enumerate() {
                *d *= self.activations[l - 1].derivative(trace.activations[l][i]);
            }
            delta = next_delta;
        }
        unreachable!("loop returns at l == 0");
    }
}
