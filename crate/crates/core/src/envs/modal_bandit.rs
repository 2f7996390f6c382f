//! One-step contextual task with a two-component Gaussian action density.

use std::f64::consts::PI;

use rand::Rng as _;

use super::{Env, Step};
use crate::error::{ensure_dim, DmpoError, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ModalBanditParams {
    pub offset: f64,
    pub context_gain: f64,
    pub std: f64,
    /// Success if the action lies within this distance of a component mean.
    pub success_radius: f64,
    pub max_action: f64,
}

impl Default for ModalBanditParams {
    fn default() -> Self {
        ModalBanditParams {
            offset: 0.5,
            context_gain: 0.3,
            std: 0.05,
            success_radius: 0.15,
            max_action: 1.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModalBandit {
    params: ModalBanditParams,
    obs: [f64; 2],
    done: bool,
    mode: Option<usize>,
}

impl ModalBandit {
    pub fn new(params: ModalBanditParams) -> Self {
        ModalBandit {
            params,
            obs: [0.0, 0.0],
            done: true,
            mode: None,
        }
    }

    pub fn params(&self) -> &ModalBanditParams {
        &self.params
    }

    /// Means of the two components for context `o`:
    /// `(+-offset + g o_1, +-g o_2)`.
    pub fn means(&self, o: [f64; 2]) -> [[f64; 2]; 2] {
        let p = &self.params;
        [
            [p.offset + p.context_gain * o[0], p.context_gain * o[1]],
            [-p.offset + p.context_gain * o[0], -p.context_gain * o[1]],
        ]
    }

    /// Log-density of `a` under the equal-weight mixture.
    pub fn log_density(&self, o: [f64; 2], a: [f64; 2]) -> f64 {
        let s2 = self.params.std * self.params.std;
        let logs = self.means(o).map(|m| {
            let q = (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2);
            -(2.0 * PI * s2).ln() - q / (2.0 * s2)
        });
        let hi = logs[0].max(logs[1]);
        hi + (0.5 * (logs[0] - hi).exp() + 0.5 * (logs[1] - hi).exp()).ln()
    }

    pub fn context(&self) -> [f64; 2] {
        self.obs
    }

    /// Draws a component uniformly, then an action from it.
    pub fn expert_action(&self, rng: &mut Rng) -> (usize, [f64; 2]) {
        let c = usize::from(rng.random::<bool>());
        let m = self.means(self.obs)[c];
        let s = self.params.std;
        (c, [m[0] + s * rng::normal(rng), m[1] + s * rng::normal(rng)])
    }
}

impl Env for ModalBandit {
    fn obs_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-self.params.max_action, self.params.max_action)
    }

    fn max_steps(&self) -> usize {
        1
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        self.obs = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        self.done = false;
        self.mode = None;
        self.obs.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.done {
            return Err(DmpoError::Env("step called after the episode ended".into()));
        }
        ensure_dim("action", 2, action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(DmpoError::Env(format!("non-finite action {action:?}")));
        }
        let m = self.params.max_action;
        let a = [action[0].clamp(-m, m), action[1].clamp(-m, m)];
        let d = self.means(self.obs).map(|mu| ((a[0] - mu[0]).powi(2) + (a[1] - mu[1]).powi(2)).sqrt());
        let nearest = usize::from(d[1] < d[0]);
        let success = d[nearest] < self.params.success_radius;
        self.mode = Some(nearest);
        self.done = true;
        Ok(Step {
            obs: self.obs.to_vec(),
            reward: self.log_density(self.obs, a),
            terminated: true,
            truncated: false,
            success,
        })
    }

    fn mode(&self) -> Option<usize> {
        self.mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_peaks_at_component_means() {
        let env = ModalBandit::new(ModalBanditParams::default());
        let o = [0.3, -0.6];
        let [m0, m1] = env.means(o);
        let at_mean = env.log_density(o, m0);
        assert!((at_mean - env.log_density(o, m1)).abs() < 1e-9);
        assert!(at_mean > env.log_density(o, [m0[0] + 0.05, m0[1]]));
        // equal weights: half the single-component peak density
        let s2: f64 = 0.05 * 0.05;
        assert!((at_mean - (0.5f64.ln() - (2.0 * PI * s2).ln())).abs() < 1e-6);
    }

    #[test]
    fn single_step_episodes() {
        let mut env = ModalBandit::new(ModalBanditParams::default());
        env.reset(1);
        let s = env.step(&[0.0, 0.0]).unwrap();
        assert!(s.terminated && !s.success);
        assert!(env.step(&[0.0, 0.0]).is_err());
    }
}
