//! AdamW with warmup, shared by the language model and the token classifier.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then constant.
    Constant,
    /// Linear warmup, then linear decay to zero at `total_steps`.
    LinearDecay { total_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup: 100,
        }
    }
}

impl OptimConfig {
    pub fn learning_rate(&self, step: usize, schedule: Schedule) -> f64 {
        let warm = if self.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        };
        match schedule {
            Schedule::Constant => self.lr * warm,
            Schedule::LinearDecay { total_steps } => {
                if step < self.warmup {
                    self.lr * warm
                } else {
                    let span = total_steps.saturating_sub(self.warmup).max(1) as f64;
                    let done = (step - self.warmup) as f64;
                    self.lr * (1.0 - done / span).max(0.0)
                }
            }
        }
    }
}

/// Moment buffers for a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    pub schedule: Schedule,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimConfig, schedule: Schedule, shapes: &[usize]) -> Self {
        AdamW {
            config,
            schedule,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update. `decay[i]` selects decoupled weight decay for tensor `i`.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], decay: &[bool]) {
        let c = self.config;
        let lr = c.learning_rate(self.step, self.schedule);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + c.eps) + wd * *w);
            }
        }
    }
}
