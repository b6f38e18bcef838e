use serde::{Deserialize, Serialize};

use super::{Module, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Moment buffers are matched to parameters by visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Clears moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.first_moment.clear();
        self.second_moment.clear();
    }

    pub fn step_module<M: Module<F> + ?Sized>(&mut self, module: &mut M) {
        let mut sizes = Vec::new();
        module.visit_params("", &mut |_, p| sizes.push(p.value.len()));
        if self.first_moment.is_empty() {
            self.first_moment = sizes.iter().map(|&n| vec![F::zero(); n]).collect();
            self.second_moment = sizes.iter().map(|&n| vec![F::zero(); n]).collect();
        }
        assert_eq!(self.first_moment.len(), sizes.len(), "optimizer/parameter mismatch");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = F::lit(c.lr);
        let decay = F::lit(1.0 - c.lr * c.weight_decay);
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let eps = F::lit(c.eps);
        let (ms, vs) = (&mut self.first_moment, &mut self.second_moment);
        let mut idx = 0;
        module.visit_params_mut("", &mut |_, p| {
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            idx += 1;
            for j in 0..p.grad.len() {
                let g = p.grad[j];
                let w = &mut p.value.data[j];
                *w *= decay;
                m[j] = b1 * m[j] + (F::one() - b1) * g;
                v[j] = b2 * v[j] + (F::one() - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
