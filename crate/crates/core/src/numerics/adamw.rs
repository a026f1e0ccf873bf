use serde::{Deserialize, Serialize};

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(shape: &[usize]) -> Self {
        Self::with_betas(shape, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One AdamW update with decoupled weight decay.
///
/// The decay `θ ← θ − lr·wd·θ` is applied before the bias-corrected adaptive
/// step and never enters the moment estimates.
pub fn adamw_step(p: &mut Parameter, s: &mut AdamWState, lr: f64, wd: f64) -> Result<()> {
    if !p.trainable {
        return Err(Error::Usage("adamw_step on a frozen parameter".into()));
    }
    if s.m.shape() != p.shape() || s.v.shape() != p.shape() {
        return Err(Error::shape("adamw_step", p.shape(), s.m.shape()));
    }
    s.step += 1;
    let t = s.step as i32;
    let bc1 = 1.0 - s.beta1.powi(t);
    let bc2 = 1.0 - s.beta2.powi(t);
    let decay = 1.0 - lr * wd;
    let (b1, b2, eps) = (s.beta1, s.beta2, s.eps);
    let g = p.grad.data();
    let theta = p.value.data_mut();
    let m = s.m.data_mut();
    let v = s.v.data_mut();
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] = theta[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(theta: f64, grad: f64) -> Parameter {
        let mut p = Parameter::trainable(Tensor::vector(vec![theta]));
        p.grad = Tensor::vector(vec![grad]);
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.0, 1.0);
        let mut s = AdamWState::new(&[1]);
        adamw_step(&mut p, &mut s, 0.1, 0.01).unwrap();
        assert!((p.value.data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = scalar(1.0, 0.0);
        let mut s = AdamWState::new(&[1]);
        for _ in 0..5 {
            adamw_step(&mut p, &mut s, 0.1, 0.0).unwrap();
        }
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut p = scalar(1.0, 0.0);
        let mut s = AdamWState::new(&[1]);
        adamw_step(&mut p, &mut s, 0.1, 0.01).unwrap();
        assert!((p.value.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_rejected() {
        let mut p = Parameter::frozen(Tensor::vector(vec![1.0]));
        let mut s = AdamWState::new(&[1]);
        assert!(matches!(adamw_step(&mut p, &mut s, 0.1, 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut p = Parameter::trainable(Tensor::vector(vec![0.5, -0.5, 2.0]));
        let mut s = AdamWState::new(&[3]);
        for k in 0..20 {
            let g = (k as f64 * 0.7).sin();
            p.grad = Tensor::vector(vec![g, -g, 0.3 * g]);
            adamw_step(&mut p, &mut s, 0.01, 0.01).unwrap();
            assert!(s.v.data().iter().all(|&v| v >= 0.0));
        }
    }
}
