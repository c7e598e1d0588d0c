//! Adam with bias correction. One [`AdamState`] per parameter group.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::nn::ParamGroup;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(group: &ParamGroup, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = group.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients must be finite and shaped like `group`.
    pub fn step(&mut self, group: &mut ParamGroup, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len()
            || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::invalid("gradient shapes do not match the parameter group"));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - math::powi(beta1, self.step as i32);
        let c2 = 1.0 - math::powi(beta2, self.step as i32);
        for (((t, g), m), v) in group
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= lr * m_hat / (math::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn group(values: &[f64]) -> ParamGroup {
        ParamGroup::new(vec![Tensor::vector(values.to_vec())])
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_advances_step() {
        let mut g = group(&[1.0, -2.0]);
        let mut adam = AdamState::new(&g, AdamConfig::default());
        adam.step(&mut g, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(g.flatten(), vec![1.0, -2.0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut g = group(&[0.0, 0.0, 0.0]);
        let mut adam = AdamState::new(&g, AdamConfig::default());
        adam.step(&mut g, &[vec![3.0, -0.01, 250.0]]).unwrap();
        for (p, s) in g.flatten().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 1e-3).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut g = group(&[0.0]);
        let mut adam = AdamState::new(&g, AdamConfig::default());
        assert!(adam.step(&mut g, &[vec![f64::NAN]]).is_err());
    }
}
