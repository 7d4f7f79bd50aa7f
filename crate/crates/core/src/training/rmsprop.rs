use serde::{Deserialize, Serialize};

use crate::gru::GruNetwork;

use super::grads::GradientSet;

/// Elementwise RMSProp update:
/// `cache ← ρ·cache + (1−ρ)·g²`, `w ← w − lr·g/(√cache + ε)`.
pub fn rmsprop_step(weights: &mut [f64], grads: &[f64], cache: &mut [f64], lr: f64, decay: f64, eps: f64) {
    assert_eq!(weights.len(), grads.len());
    assert_eq!(weights.len(), cache.len());
    for ((w, &g), c) in weights.iter_mut().zip(grads).zip(cache.iter_mut()) {
        *c = decay * *c + (1.0 - decay) * g * g;
        *w -= lr * g / (c.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 1e-3,
            decay: 0.9,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one squared-gradient cache per weight array.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    cache: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(net: &GruNetwork, config: RmsPropConfig) -> Self {
        RmsProp {
            config,
            cache: net.arrays().iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut GruNetwork, grads: &GradientSet) {
        let RmsPropConfig {
            learning_rate,
            decay,
            eps,
        } = self.config;
        for ((w, g), c) in net
            .arrays_mut()
            .into_iter()
            .zip(grads.arrays())
            .zip(self.cache.iter_mut())
        {
            rmsprop_step(w, g, c, learning_rate, decay, eps);
        }
    }

    pub fn cache(&self) -> &[Vec<f64>] {
        &self.cache
    }
}
