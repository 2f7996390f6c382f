use std::collections::BTreeMap;

use dmpo_autodiff::{Gradients, ParamKey, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DmpoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per key.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) moments: BTreeMap<ParamKey, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let c = &config;
        let ok = c.lr > 0.0
            && (0.0..1.0).contains(&c.beta1)
            && (0.0..1.0).contains(&c.beta2)
            && c.eps > 0.0;
        if !ok {
            return Err(DmpoError::InvalidArgument(format!("bad optimizer settings {c:?}")));
        }
        Ok(Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn with_lr(lr: f64) -> Result<Self> {
        Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Parameters without a
    /// gradient keep their value and moments.
    pub fn step(&mut self, params: Vec<(ParamKey, &mut Tensor)>, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (key, p) in params {
            let Some(g) = grads.get(key) else { continue };
            let (m, v) = self
                .moments
                .entry(key)
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((x, &gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales the gradients of `group` so their joint norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_group_norm(grads: &mut Gradients, group: u16, max_norm: f64) -> f64 {
    let norm = grads.group_norm(group);
    if norm > max_norm && norm > 0.0 {
        grads.scale_group(group, max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let key = ParamKey::new(0, 0);
        let mut p = Tensor::row(&[1.0, -1.0]);
        let mut g = Gradients::default();
        g.insert(key, Tensor::row(&[0.5, -3.0]));
        let mut adam = Adam::with_lr(0.1).unwrap();
        adam.step(vec![(key, &mut p)], &g);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let key = ParamKey::new(0, 0);
        let mut p = Tensor::scalar(3.0);
        let mut adam = Adam::with_lr(0.05).unwrap();
        for _ in 0..2000 {
            let mut g = Gradients::default();
            g.insert(key, Tensor::scalar(2.0 * (p.item() - 1.0)));
            adam.step(vec![(key, &mut p)], &g);
        }
        assert!((p.item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_bounds_group_norm() {
        let mut g = Gradients::default();
        g.insert(ParamKey::new(0, 0), Tensor::row(&[3.0, 4.0]));
        g.insert(ParamKey::new(1, 0), Tensor::row(&[10.0]));
        let before = clip_group_norm(&mut g, 0, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.group_norm(0) - 1.0).abs() < 1e-12);
        assert_eq!(g.group_norm(1), 10.0);
    }

    #[test]
    fn bad_settings_rejected() {
        assert!(Adam::with_lr(0.0).is_err());
    }
}
