//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};
use slicer_autodiff::Tensor;

use crate::error::{Result, SlicerError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

fn check_aligned(params: &[Tensor], other: &[Tensor], what: &str) -> Result<()> {
    if params.len() != other.len()
        || params
            .iter()
            .zip(other)
            .any(|(p, o)| p.shape() != o.shape())
    {
        return Err(SlicerError::Shape {
            context: "adam_step",
            detail: format!("{what} not aligned with parameters"),
        });
    }
    Ok(())
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_aligned(params, grads, "gradients")?;
        check_aligned(params, &self.m, "first moments")?;
        check_aligned(params, &self.v, "second moments")?;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut s = AdamState::new(cfg(1e-3), &p);
        s.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(cfg(1e-3), &p);
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1: step = lr / (1 + eps).
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-15);
    }

    #[test]
    fn updates_decay_after_gradient_stops() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(cfg(1e-3), &p);
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let mut prev = p[0].item();
        let mut deltas = Vec::new();
        for _ in 0..2 {
            s.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
            deltas.push((p[0].item() - prev).abs());
            prev = p[0].item();
        }
        // Hand recurrence: step 2 has m = 0.09, v = 0.000999.
        let (m2, v2) = (0.09, 0.001 * 0.999);
        let d2 = 1e-3 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((deltas[0] - d2).abs() < 1e-15);
        assert!(deltas[1] < deltas[0]);
        assert!(deltas[0] < 1e-3);
    }

    #[test]
    fn misaligned_gradients_rejected() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut s = AdamState::new(cfg(1e-3), &p);
        assert!(s.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(s.step(&mut p, &[]).is_err());
    }
}
