//! Bias-corrected Adam with decoupled additive weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of completed updates.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Parameter updates skipped because of a non-finite gradient.
    pub skipped: u64,
}

/// What one call to [`AdamState::step`] did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    pub skipped_non_finite: usize,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            skipped: 0,
        }
    }

    /// Applies one update. `grads[i] == None` leaves parameter `i` (and its
    /// moments) untouched, which is how frozen parameters are handled.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<StepReport> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "adam: {} params, {} gradients, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let ok = self.m[i].len() == p.numel() && g.as_ref().map_or(true, |g| g.len() == p.numel());
            if !ok {
                return Err(TensorError::InvalidArgument(format!(
                    "adam: shape disagreement for parameter {i}"
                )));
            }
        }

        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let mut report = StepReport::default();

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                report.skipped_non_finite += 1;
                self.skipped += 1;
                log::warn!("adam: non-finite gradient for parameter {i}, update skipped");
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps) + lr * weight_decay * *w;
            }
            report.updated += 1;
        }
        self.step += 1;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            st.step(&mut params, &[Some(vec![0.0; 3])]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &params);
        st.step(&mut params, &[Some(vec![3.0, -0.25])]).unwrap();
        let d = params[0].data();
        assert!((d[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((d[1] - 0.01 * 0.25 / (0.25 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_skipped_and_counted() {
        let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let r = st
            .step(&mut params, &[Some(vec![f64::NAN]), Some(vec![1.0])])
            .unwrap();
        assert_eq!(r.skipped_non_finite, 1);
        assert_eq!(r.updated, 1);
        assert_eq!(params[0].data(), &[1.0]);
        assert!(params[1].data()[0] < 1.0);
        assert_eq!(st.skipped, 1);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn frozen_parameters_do_not_decay() {
        let mut params = vec![Tensor::scalar(1.0)];
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &params);
        st.step(&mut params, &[None]).unwrap();
        assert_eq!(params[0].data(), &[1.0]);
    }
}
