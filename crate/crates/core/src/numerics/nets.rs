use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist::{HeadGrad, HeadOutput};
use super::mlp::{Mlp, MlpTrace};
use super::param::ParamVector;
use crate::error::{DiceError, Result};

/// Default clamp interval for the Gaussian log-std parameters.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Mean output plus one state-independent log-std parameter per action
    /// dimension, clamped to `[log_std_min, log_std_max]` on use.
    Gaussian {
        action_dim: usize,
        log_std_min: f64,
        log_std_max: f64,
    },
    Categorical { n: usize },
}

impl HeadKind {
    pub fn gaussian(action_dim: usize) -> Self {
        HeadKind::Gaussian {
            action_dim,
            log_std_min: LOG_STD_MIN,
            log_std_max: LOG_STD_MAX,
        }
    }

    fn body_outputs(&self) -> usize {
        match *self {
            HeadKind::Gaussian { action_dim, .. } => action_dim,
            HeadKind::Categorical { n } => n,
        }
    }

    fn extra_params(&self) -> usize {
        match *self {
            HeadKind::Gaussian { action_dim, .. } => action_dim,
            HeadKind::Categorical { .. } => 0,
        }
    }
}

/// Policy network: a two-hidden-layer ReLU body feeding a Gaussian or
/// categorical head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    body: Mlp,
    head: HeadKind,
    params: ParamVector,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: usize,
        head: HeadKind,
        output_gain: f64,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let body = Mlp::two_hidden(obs_dim, hidden, head.body_outputs())?;
        let mut params = body.init_params(rng, output_gain);
        params.extend(std::iter::repeat(init_log_std).take(head.extra_params()));
        Ok(PolicyNet {
            body,
            head,
            params: ParamVector::from_vec(params),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.body.input_dim()
    }

    pub fn head(&self) -> &HeadKind {
        &self.head
    }

    pub fn num_params(&self) -> usize {
        self.body.num_params() + self.head.extra_params()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        params.check_len("policy params", self.num_params())?;
        self.params = params;
        Ok(())
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    fn head_from_body(&self, out: Vec<f64>) -> HeadOutput {
        match self.head {
            HeadKind::Gaussian {
                log_std_min,
                log_std_max,
                ..
            } => {
                let raw = &self.params[self.body.num_params()..];
                HeadOutput::Gaussian {
                    mean: out,
                    log_std: raw.iter().map(|v| v.clamp(log_std_min, log_std_max)).collect(),
                }
            }
            HeadKind::Categorical { .. } => HeadOutput::Categorical { logits: out },
        }
    }

    pub fn forward(&self, obs: &[f64]) -> Result<HeadOutput> {
        let out = self.body.forward(&self.params, obs)?;
        Ok(self.head_from_body(out))
    }

    pub fn forward_trace(&self, obs: &[f64]) -> Result<(HeadOutput, MlpTrace)> {
        let trace = self.body.forward_trace(&self.params, obs)?;
        let head = self.head_from_body(trace.output().to_vec());
        Ok((head, trace))
    }

    /// Accumulates the parameter gradient for an upstream gradient at the
    /// head outputs. Returns the gradient with respect to the observation.
    pub fn backward(&self, trace: &MlpTrace, upstream: &HeadGrad, grad: &mut [f64]) -> Vec<f64> {
        let n_body = self.body.num_params();
        match (&self.head, upstream) {
            (
                HeadKind::Gaussian {
                    log_std_min,
                    log_std_max,
                    ..
                },
                HeadGrad::Gaussian { mean, log_std },
            ) => {
                for (i, g) in log_std.iter().enumerate() {
                    let raw = self.params[n_body + i];
                    // clamped coordinates pass no gradient
                    if raw > *log_std_min && raw < *log_std_max {
                        grad[n_body + i] += g;
                    }
                }
                self.body.backward(&self.params, trace, mean, grad)
            }
            (HeadKind::Categorical { .. }, HeadGrad::Categorical { logits }) => {
                self.body.backward(&self.params, trace, logits, grad)
            }
            _ => panic!("head gradient kind does not match policy head"),
        }
    }
}

/// Scalar-output network used for state values, diversity values and
/// state-action critics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    body: Mlp,
    params: ParamVector,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let body = Mlp::two_hidden(input_dim, hidden, 1)?;
        let params = ParamVector::from_vec(body.init_params(rng, 1.0));
        Ok(ValueNet { body, params })
    }

    pub fn input_dim(&self) -> usize {
        self.body.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.body.num_params()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        params.check_len("value params", self.num_params())?;
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        let v = self.body.forward(&self.params, input)?[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DiceError::NonFinite {
                what: "value output".into(),
                agent: None,
            })
        }
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<(f64, MlpTrace)> {
        let trace = self.body.forward_trace(&self.params, input)?;
        Ok((trace.output()[0], trace))
    }

    /// Accumulates `upstream * d(value)/d(params)`; returns the input gradient.
    pub fn backward(&self, trace: &MlpTrace, upstream: f64, grad: &mut [f64]) -> Vec<f64> {
        self.body.backward(&self.params, trace, &[upstream], grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_std_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PolicyNet::new(2, 4, HeadKind::gaussian(1), 1.0, 0.0, &mut rng).unwrap();
        let n = net.num_params();
        net.params_mut()[n - 1] = -50.0;
        match net.forward(&[0.1, 0.2]).unwrap() {
            HeadOutput::Gaussian { log_std, .. } => assert_eq!(log_std, vec![LOG_STD_MIN]),
            _ => unreachable!(),
        }
        net.params_mut()[n - 1] = 7.0;
        match net.forward(&[0.1, 0.2]).unwrap() {
            HeadOutput::Gaussian { log_std, .. } => assert_eq!(log_std, vec![LOG_STD_MAX]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn set_params_roundtrip_and_rejects_wrong_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PolicyNet::new(3, 5, HeadKind::Categorical { n: 4 }, 1.0, 0.0, &mut rng).unwrap();
        let p = net.params().clone();
        net.set_params(p.clone()).unwrap();
        assert_eq!(net.params(), &p);
        assert!(net.set_params(ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ValueNet::new(3, 8, &mut rng).unwrap();
        let x = [0.5, -0.1, 2.0];
        assert_eq!(net.forward(&x).unwrap().to_bits(), net.forward(&x).unwrap().to_bits());
    }
}
