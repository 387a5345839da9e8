use serde::{Deserialize, Serialize};

use super::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with moment buffers kept in parameter visitation order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (c.learning_rate / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.epsilon as f32);
        let mut idx = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        model.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if first.len() <= idx {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for j in 0..p.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                p.value[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
                p.grad[j] = 0.0;
            }
            idx += 1;
        });
    }
}
