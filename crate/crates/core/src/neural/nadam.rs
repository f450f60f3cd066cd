use serde::{Deserialize, Serialize};

use super::{check_len, NeuralError, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Nesterov-accelerated Adam. Moments are allocated on the first step and
/// must keep the parameter shapes afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct NadamState {
    pub config: NadamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl NadamState {
    pub fn new(config: NadamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` against `grads` (same structure).
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<(), NeuralError> {
        let g: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, m)| m.as_slice()).collect();
        let mut p: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(|m| m.as_mut_slice()).collect();
        self.step_slices(&mut p, &g)
    }

    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NeuralError> {
        check_len("nadam tensor count", params.len(), grads.len())?;
        for (p, g) in params.iter().zip(grads) {
            check_len("nadam tensor", p.len(), g.len())?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else {
            check_len("nadam state", self.m.len(), params.len())?;
            for (m, p) in self.m.iter().zip(params.iter()) {
                check_len("nadam moment", m.len(), p.len())?;
            }
        }
        self.step += 1;
        let NadamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let bc1_next = 1.0 - b1.powi(t + 1);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = b1 * m[i] / bc1_next + (1.0 - b1) * gi / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
