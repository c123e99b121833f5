use serde::{Deserialize, Serialize};

use super::RerankerParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adam over the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    first: Vec<T>,
    second: Vec<T>,
    steps: u32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &RerankerParams<T>) -> Self {
        let n = params.as_slice().len();
        Self { first: vec![T::zero(); n], second: vec![T::zero(); n], steps: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut RerankerParams<T>, grads: &RerankerParams<T>, settings: &AdamSettings) {
        self.steps += 1;
        let (b1, b2) = (T::lit(settings.beta1), T::lit(settings.beta2));
        let t = self.steps as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let mut clip = T::one();
        if settings.clip_norm > 0.0 {
            let norm = grads.as_slice().iter().map(|&g| g * g).sum::<T>().sqrt();
            let max = T::lit(settings.clip_norm);
            if norm > max {
                clip = max / norm;
            }
        }
        let lr = T::lit(settings.lr);
        let eps = T::lit(settings.eps);
        let p = params.as_mut_slice();
        for (k, &g) in grads.as_slice().iter().enumerate() {
            let g = g * clip;
            self.first[k] = b1 * self.first[k] + (T::one() - b1) * g;
            self.second[k] = b2 * self.second[k] + (T::one() - b2) * g * g;
            let mhat = self.first[k] / c1;
            let vhat = self.second[k] / c2;
            p[k] = p[k] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
