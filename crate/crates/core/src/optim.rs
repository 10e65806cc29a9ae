//! Adam with bias correction over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self::with_hyper(num_params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyper(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.len(),
                params.len(),
                grads.len()
            )));
        }
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut p = vec![0.5, -1.0, 2.0];
        let before = p.clone();
        let mut s = AdamState::new(3);
        s.step(&mut p, &[0.0; 3], 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        s.step(&mut p, &[1.0], 0.01).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = lr / (1 + eps).
        assert!((p[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((p[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_hand_unrolled_trace() {
        let (lr, g, b1, b2, eps) = (0.05, 0.3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        s.step(&mut p, &[g], lr).unwrap();
        s.step(&mut p, &[g], lr).unwrap();

        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - x).abs() < 1e-12);
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_lr() {
        let mut s = AdamState::new(2);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 2], 0.0).is_err());
    }
}
