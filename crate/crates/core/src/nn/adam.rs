use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, Param};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

/// Adam with bias correction and optional L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
    lr: f64,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
            lr: config.learning_rate,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Advance the shared step counter; call once before `apply`ing every param.
    pub fn begin_step(&mut self) {
        self.state.step += 1;
    }

    pub fn apply(&mut self, p: &mut Param<T>) {
        if !p.trainable {
            return;
        }
        let c = self.config;
        let t = self.state.step.max(1) as i32;
        let (m, v) = self
            .state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(c.eps);
        let wd = T::from_f64_lossy(c.weight_decay);
        for i in 0..p.len() {
            let g = p.grad[i] + wd * p.value[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut p = Param::new("w", &[2], vec![1.0, -1.0]);
        p.grad = vec![0.3, -5.0];
        adam.begin_step();
        adam.apply(&mut p);
        assert!((p.value[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.value[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        let mut p = Param::new("w", &[1], vec![3.0]);
        for _ in 0..500 {
            p.grad = vec![2.0 * (p.value[0] - 0.5)];
            adam.begin_step();
            adam.apply(&mut p);
        }
        assert!((p.value[0] - 0.5).abs() < 1e-2);
    }

    #[test]
    fn skips_buffers() {
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut p = Param::buffer("running_mean", &[1], vec![0.25f32]);
        p.grad = vec![1.0];
        adam.begin_step();
        adam.apply(&mut p);
        assert_eq!(p.value, vec![0.25]);
        assert!(adam.state.moments.is_empty());
    }
}
