use serde::{Deserialize, Serialize};

use super::{Matrix, NnError};

/// Adam hyperparameters. `warmup_steps > 0` ramps the learning rate
/// linearly over the first steps; otherwise it is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(default)]
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Matrix]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.data().len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || self.step >= w {
            self.config.lr
        } else {
            self.config.lr * self.step as f64 / w as f64
        }
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::shape(
                "adam_step",
                format!("{} tensors", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.data().len() != self.m[i].len() {
                return Err(NnError::shape(
                    "adam_step",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let lr = self.current_lr();
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_m(v: &[f64]) -> Matrix {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = vec_m(&[1.5, -2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &[&w]);
        let g = vec_m(&[0.4, 0.0]);
        adam.step(&mut [&mut w], &[&g]).unwrap();
        let before = w.clone();
        let m_before = adam.first_moments()[0].clone();
        let zero = vec_m(&[0.0, 0.0]);
        // m decays but the update still moves by m_hat / sqrt(v_hat);
        // a state that has only ever seen zero gradients stays put.
        let mut fresh_w = before.clone();
        let mut fresh = AdamState::new(AdamConfig::default(), &[&fresh_w]);
        for _ in 0..5 {
            fresh.step(&mut [&mut fresh_w], &[&zero]).unwrap();
        }
        assert_eq!(fresh_w, before);
        adam.step(&mut [&mut w], &[&zero]).unwrap();
        assert!(adam.first_moments()[0][0].abs() < m_before[0].abs());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut w = vec_m(&[1.0, 1.0, 1.0]);
        let mut adam = AdamState::new(cfg, &[&w]);
        let g = vec_m(&[3.0, -0.2, 1e-3]);
        adam.step(&mut [&mut w], &[&g]).unwrap();
        let expected = [0.95, 1.05, 0.95];
        for (a, e) in w.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn warmup_scales_early_steps() {
        let cfg = AdamConfig {
            lr: 0.1,
            warmup_steps: 4,
            ..AdamConfig::default()
        };
        let mut w = vec_m(&[0.0]);
        let mut adam = AdamState::new(cfg, &[&w]);
        adam.step(&mut [&mut w], &[&vec_m(&[1.0])]).unwrap();
        assert!((w.data()[0] + 0.025).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut w = vec_m(&[0.0, 1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &[&w]);
        assert!(adam.step(&mut [&mut w], &[&vec_m(&[1.0])]).is_err());
        assert!(adam.step(&mut [], &[]).is_err());
    }
}
