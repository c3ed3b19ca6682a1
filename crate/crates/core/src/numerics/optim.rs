use serde::{Deserialize, Serialize};

use super::param::ParamVector;
use crate::error::{DiceError, Result};

/// Learning rate used when none is configured.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `θ ← θ + α·g`
    #[default]
    Sga,
    /// Adaptive moments, ascent form.
    Adam,
}

/// Step rule plus whatever running statistics it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub kind: OptimizerKind,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            lr,
            kind,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn sga(lr: f64) -> Self {
        Self::new(OptimizerKind::Sga, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moves `params` along the ascent direction `grad`. A gradient with
    /// non-finite components is rejected and leaves everything untouched.
    pub fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        grad.check_len("optimizer gradient", params.len())?;
        if !grad.is_finite() {
            return Err(DiceError::NonFinite {
                what: "gradient passed to optimizer".into(),
                agent: None,
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sga => params.axpy(self.lr, grad),
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    self.first_moment = vec![0.0; params.len()];
                    self.second_moment = vec![0.0; params.len()];
                }
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    params[i] += self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::apply`].
pub fn apply_gradient(params: &ParamVector, grad: &ParamVector, opt: &mut OptimizerState) -> Result<ParamVector> {
    let mut out = params.clone();
    opt.apply(&mut out, grad)?;
    Ok(out)
}

/// Rescales `grad` so its L2 norm is at most `max_norm`. Returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm && norm > 0.0 {
        grad.scale_mut(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let p = ParamVector::from_vec(vec![0.5, -1.0]);
        let mut opt = OptimizerState::sga(0.3);
        assert_eq!(apply_gradient(&p, &ParamVector::zeros(2), &mut opt).unwrap(), p);
    }

    #[test]
    fn unit_step() {
        let p = ParamVector::from_vec(vec![0.5, -1.0, 2.0]);
        let mut opt = OptimizerState::sga(1.0);
        let out = apply_gradient(&p, &ParamVector::from_vec(vec![1.0; 3]), &mut opt).unwrap();
        assert_eq!(&out[..], &[1.5, 0.0, 3.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(DEFAULT_LEARNING_RATE, 0.0001);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = ParamVector::from_vec(vec![0.5, -1.0]);
        let mut opt = OptimizerState::sga(1.0);
        let err = opt.apply(&mut p, &ParamVector::from_vec(vec![f64::NAN, 0.0]));
        assert!(matches!(err, Err(DiceError::NonFinite { .. })));
        assert_eq!(&p[..], &[0.5, -1.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamVector::from_vec(vec![0.0, 0.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01);
        opt.apply(&mut p, &ParamVector::from_vec(vec![3.0, -0.5])).unwrap();
        assert!((p[0] - 0.01).abs() < 1e-8 && (p[1] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn clip_grad_norm_caps() {
        let mut g = ParamVector::from_vec(vec![30.0, 40.0]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        assert!((g.norm() - 10.0).abs() < 1e-12);
        let mut small = ParamVector::from_vec(vec![0.3, 0.4]);
        clip_grad_norm(&mut small, 10.0);
        assert_eq!(&small[..], &[0.3, 0.4]);
    }
}
