use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily, one per
/// tensor slot, so the same slot must be passed in the same position on
/// every step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let c = self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let correction1 = one - T::of(c.beta1.powi(self.step as i32));
        let correction2 = one - T::of(c.beta2.powi(self.step as i32));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.epsilon);
        for (k, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(param.len(), grad.len(), "gradient length mismatch for tensor {k}");
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                param.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -1.0]);
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        adam.step(&mut [&mut p], &[vec![3.0, -0.5]]);
        assert!((p.data[0] - 0.9).abs() < 1e-6);
        assert!((p.data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = Tensor::from_vec(&[1], vec![5.0f64]);
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        for _ in 0..500 {
            let g = vec![2.0 * (p.data[0] - 2.0)];
            adam.step(&mut [&mut p], &[g]);
        }
        assert!((p.data[0] - 2.0).abs() < 1e-2);
    }
}
