use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments sized for `params`.
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update of every tensor in `params`, using the
/// gradient stored on each tensor. Tensors without a gradient are treated
/// as having a zero gradient.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {lr}")));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err(format!(
            "optimizer state holds {} tensors, {} parameters given",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if m.len() != p.numel() {
            return Err(shape_err(format!("moment of length {} for parameter {:?}", m.len(), p.shape())));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2, eps, lr) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(lr));
    let (c1, c2) = (T::of(c1), T::of(c2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);

    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.grad().map(<[T]>::to_vec) else {
            // Moments still decay so the schedule matches a zero gradient.
            m.iter_mut().for_each(|x| *x *= b1);
            v.iter_mut().for_each(|x| *x *= b2);
            apply(p.data_mut(), m, v, c1, c2, lr, eps);
            continue;
        };
        for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
            *mi = b1 * *mi + one_b1 * *gi;
            *vi = b2 * *vi + one_b2 * *gi * *gi;
        }
        apply(p.data_mut(), m, v, c1, c2, lr, eps);
    }
    Ok(())
}

fn apply<T: Scalar>(data: &mut [T], m: &[T], v: &[T], c1: T, c2: T, lr: T, eps: T) {
    for ((x, &mi), &vi) in data.iter_mut().zip(m).zip(v) {
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        *x -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = vec![param(0.3)];
        let mut st = AdamState::new(&ps, AdamConfig::default());
        for _ in 0..5 {
            ps[0].zero_grad();
            ps[0].accumulate_grad(&[0.0]).unwrap();
            adam_step(&mut ps, &mut st, 0.1).unwrap();
        }
        assert_eq!(ps[0].data(), &[0.3]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = vec![param(1.0)];
        let mut st = AdamState::new(&ps, AdamConfig::default());
        ps[0].accumulate_grad(&[1.0]).unwrap();
        adam_step(&mut ps, &mut st, 0.1).unwrap();
        // m̂ = 1, v̂ = 1, so the step is 0.1 / (1 + 1e-8).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut ps = vec![param(0.0)];
        let mut st = AdamState::new(&ps, AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..50 {
            ps[0].zero_grad();
            ps[0].accumulate_grad(&[1.0]).unwrap();
            adam_step(&mut ps, &mut st, 0.01).unwrap();
            assert!(ps[0].data()[0] < last);
            last = ps[0].data()[0];
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut ps = vec![param(0.0)];
        let mut st = AdamState::new(&[Tensor::<f64>::zeros(&[2])], AdamConfig::default());
        assert!(adam_step(&mut ps, &mut st, 0.1).is_err());
        let mut st = AdamState::new(&ps, AdamConfig::default());
        assert!(adam_step(&mut ps, &mut st, 0.0).is_err());
    }
}
