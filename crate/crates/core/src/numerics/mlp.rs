//! Fully connected ReLU networks with hand-written reverse mode.
//!
//! The network is only an architecture description; parameters live in a
//! caller-owned flat slice so that policies can append head parameters and
//! gradients share the exact same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};

/// Layer sizes `[input, hidden.., output]`. Hidden layers use ReLU, the
/// output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// `acts[0]` is the input, `acts[l]` the post-activation output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(DiceError::Config(format!(
                "invalid layer sizes {sizes:?}: need >= 2 non-zero sizes"
            )));
        }
        Ok(Mlp { sizes })
    }

    /// Two hidden layers of equal width.
    pub fn two_hidden(input: usize, hidden: usize, output: usize) -> Result<Self> {
        Mlp::new(vec![input, hidden, hidden, output])
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases. The output layer's
    /// weights are multiplied by `output_gain`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, output_gain: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        let n_layers = self.sizes.len() - 1;
        for (layer, (start, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let gain = if layer + 1 == n_layers { output_gain } else { 1.0 };
            for w in &mut params[start..start + fan_in * fan_out] {
                *w = rng.gen_range(-bound..bound) * gain;
            }
        }
        params
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() < self.num_params() {
            return Err(DiceError::dim("mlp params", self.num_params(), params.len()));
        }
        if input.len() != self.input_dim() {
            return Err(DiceError::dim("mlp input", self.input_dim(), input.len()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(params, input)?.acts.pop().unwrap())
    }

    pub fn forward_trace(&self, params: &[f64], input: &[f64]) -> Result<MlpTrace> {
        self.check(params, input)?;
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        for (layer, (start, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let x = &acts[layer];
            let weights = &params[start..start + fan_in * fan_out];
            let bias = &params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
            let mut out = bias.to_vec();
            for (o, row) in out.iter_mut().zip(weights.chunks_exact(fan_in)) {
                *o += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            }
            if layer + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        Ok(MlpTrace { acts })
    }

    /// Accumulates `d(objective)/d(params)` into `grad` given the upstream
    /// gradient at the output, and returns the gradient at the input.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(upstream.len(), self.output_dim());
        debug_assert!(grad.len() >= self.num_params());
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut delta = upstream.to_vec();
        for (layer, &(start, fan_in, fan_out)) in offsets.iter().enumerate().rev() {
            let x = &trace.acts[layer];
            let w_end = start + fan_in * fan_out;
            {
                let (gw, gb) = grad[start..w_end + fan_out].split_at_mut(fan_in * fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let weights = &params[start..w_end];
            let mut next = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *n += d * w;
                }
            }
            if layer > 0 {
                // ReLU gate of the previous layer
                for (n, a) in next.iter_mut().zip(x) {
                    if *a <= 0.0 {
                        *n = 0.0;
                    }
                }
            }
            delta = next;
        }
        delta
    }

    /// Sum of per-sample parameter gradients over a batch.
    pub fn batch_gradient(&self, params: &[f64], inputs: &[Vec<f64>], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        if inputs.len() != upstream.len() {
            return Err(DiceError::dim("mlp batch upstream", inputs.len(), upstream.len()));
        }
        let mut grad = vec![0.0; self.num_params()];
        for (x, up) in inputs.iter().zip(upstream) {
            if up.len() != self.output_dim() {
                return Err(DiceError::dim("mlp upstream", self.output_dim(), up.len()));
            }
            let trace = self.forward_trace(params, x)?;
            self.backward(params, &trace, up, &mut grad);
        }
        Ok(grad)
    }
}
