use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Slots with no gradient are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "parameter count changed under Adam"
        );
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.learning_rate), T::from_f64_lossy(c.eps));
        let one = T::one();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let Some(g) = g else { continue };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64 - 1.0)];
        let before = p.clone();
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &[Some(Tensor::zeros(&[3]))]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &[Some(Tensor::scalar(1.0))]);
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 3e-4 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn identical_runs_give_identical_trajectories() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.3)];
            let mut adam = Adam::new(&p, AdamConfig::default());
            let mut traj = Vec::new();
            for s in 0..20 {
                let g = Tensor::from_fn(&[4], |i| ((s * 7 + i) % 5) as f32 - 2.0);
                adam.step(&mut p, &[Some(g)]);
                traj.extend_from_slice(p[0].data());
            }
            traj
        };
        assert_eq!(run(), run());
    }
}
