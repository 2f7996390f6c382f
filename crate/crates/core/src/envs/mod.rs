//! Toy control tasks, scripted experts and policy evaluation.

mod modal_bandit;
mod point_reach;

use std::fmt;
use std::str::FromStr;

use dmpo_autodiff::Tensor;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

pub use modal_bandit::{ModalBandit, ModalBanditParams};
pub use point_reach::{PointReach, PointReachExpert, PointReachParams, ABOVE, BELOW};

use crate::dataset::{Dataset, Record};
use crate::error::{ensure_dim, DmpoError, Result};
use crate::nn::VelocityField;
use crate::rng;
use crate::sampler;

/// Outcome of one environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// The task ended on its own; the value of the next state is 0.
    pub terminated: bool,
    /// The time limit was hit; the next state still has a value.
    pub truncated: bool,
    pub success: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Env: Send {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Per-dimension bounds of the executed action; larger inputs are clamped.
    fn action_bounds(&self) -> (f64, f64);
    fn max_steps(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
    /// Behavior class of the current episode, once it is known.
    fn mode(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    PointReach,
    PointReachShifted,
    ModalBandit,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::PointReach, EnvKind::PointReachShifted, EnvKind::ModalBandit];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::PointReach => "point-reach",
            EnvKind::PointReachShifted => "point-reach-shifted",
            EnvKind::ModalBandit => "modal-bandit",
        }
    }

    pub fn make(self) -> Box<dyn Env> {
        match self {
            EnvKind::PointReach => Box::new(PointReach::new(PointReachParams::default())),
            EnvKind::PointReachShifted => Box::new(PointReach::new(PointReachParams::shifted())),
            EnvKind::ModalBandit => Box::new(ModalBandit::new(ModalBanditParams::default())),
        }
    }

    pub fn obs_dim(self) -> usize {
        self.make().obs_dim()
    }

    pub fn action_dim(self) -> usize {
        self.make().action_dim()
    }

    /// Number of behavior classes reported by [`Env::mode`].
    pub fn num_modes(self) -> usize {
        2
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = DmpoError;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DmpoError::InvalidArgument(format!("unknown environment {s:?}")))
    }
}

/// Reset seed of episode (or environment) `index` under `seed`: the first
/// word of ChaCha stream `ENV_BASE + index`.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    rng::stream(seed, rng::streams::ENV_BASE + index).next_u64()
}

/// `n x d_obs` initial observations of episodes `0..n` under `seed`.
pub fn probe_observations(kind: EnvKind, n: usize, seed: u64) -> Tensor {
    let mut env = kind.make();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| env.reset(episode_seed(seed, i as u64))).collect();
    Tensor::from_rows(&rows)
}

/// Scripted demonstrations. Episodes where the expert fails are dropped
/// with a warning.
pub fn gen_demos(kind: EnvKind, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 {
        return Err(DmpoError::InvalidArgument("need at least one episode".into()));
    }
    let mut rng = rng::stream(seed, rng::streams::DEMOS);
    let mut records = Vec::new();
    let mut failed = 0usize;
    for ep in 0..episodes {
        let reset_seed = episode_seed(seed, ep as u64);
        let mut episode = Vec::new();
        let ok = match kind {
            EnvKind::ModalBandit => {
                let mut env = ModalBandit::new(ModalBanditParams::default());
                let obs = env.reset(reset_seed);
                let (_, a) = env.expert_action(&mut rng);
                episode.push((obs, a.to_vec()));
                env.step(&a)?.success
            }
            EnvKind::PointReach | EnvKind::PointReachShifted => {
                let params = match kind {
                    EnvKind::PointReach => PointReachParams::default(),
                    _ => PointReachParams::shifted(),
                };
                let mut env = PointReach::new(params);
                let mut obs = env.reset(reset_seed);
                let side = if rng.random::<bool>() { ABOVE } else { BELOW };
                let mut expert = PointReachExpert::new(side);
                loop {
                    let a = expert.act(&env);
                    let step = env.step(&a)?;
                    episode.push((obs, a.to_vec()));
                    obs = step.obs.clone();
                    if step.done() {
                        break step.success;
                    }
                }
            }
        };
        if !ok {
            failed += 1;
            log::warn!("expert failed in demo episode {ep}; episode dropped");
            continue;
        }
        records.extend(episode.into_iter().enumerate().map(|(t, (obs, action))| Record {
            obs,
            action,
            episode: ep as u64,
            t: t as u64,
        }));
    }
    if failed > 0 {
        log::warn!("{failed} of {episodes} demo episodes dropped");
    }
    Dataset::new(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Velocity evaluations per generated action.
    pub mean_nfe: f64,
    /// Fraction of successful episodes in each behavior class.
    pub mode_coverage: Vec<f64>,
    pub mean_length: f64,
}

impl EvalReport {
    pub fn modes_preserved(&self) -> bool {
        self.mode_coverage.iter().all(|&c| c > 0.0)
    }
}

/// Runs `episodes` episodes in lockstep with the deterministic `K`-step
/// sampler. Episode `i` resets with [`episode_seed`]`(seed, i)`.
pub fn evaluate<F: VelocityField>(field: &F, kind: EnvKind, episodes: usize, steps: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(DmpoError::InvalidArgument("need at least one episode".into()));
    }
    let mut envs: Vec<Box<dyn Env>> = (0..episodes).map(|_| kind.make()).collect();
    ensure_dim("policy observation", envs[0].obs_dim(), field.obs_dim())?;
    ensure_dim("policy action", envs[0].action_dim(), field.action_dim())?;
    let mut obs: Vec<Vec<f64>> = envs
        .iter_mut()
        .enumerate()
        .map(|(i, e)| e.reset(episode_seed(seed, i as u64)))
        .collect();
    let mut rng = rng::stream(seed, rng::streams::EVAL);
    let mut active: Vec<usize> = (0..episodes).collect();
    let mut returns = vec![0.0; episodes];
    let mut lengths = vec![0usize; episodes];
    let mut success = vec![false; episodes];
    let (mut nfe_total, mut actions_total) = (0usize, 0usize);
    while !active.is_empty() {
        let batch = Tensor::from_rows(&active.iter().map(|&i| obs[i].clone()).collect::<Vec<_>>());
        let sample = sampler::sample_deterministic(field, &batch, steps, &mut rng)?;
        nfe_total += sample.nfe * active.len();
        actions_total += active.len();
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let step = envs[i].step(sample.actions.row_slice(row))?;
            returns[i] += step.reward;
            lengths[i] += 1;
            if step.done() {
                success[i] = step.success;
            } else {
                still.push(i);
            }
            obs[i] = step.obs;
        }
        active = still;
    }
    let n = episodes as f64;
    let successes = success.iter().filter(|&&s| s).count();
    let mut coverage = vec![0.0; kind.num_modes()];
    if successes > 0 {
        for (env, _) in envs.iter().zip(&success).filter(|(_, &s)| s) {
            if let Some(m) = env.mode() {
                coverage[m] += 1.0 / successes as f64;
            }
        }
    }
    Ok(EvalReport {
        episodes,
        success_rate: successes as f64 / n,
        mean_return: returns.iter().sum::<f64>() / n,
        mean_nfe: nfe_total as f64 / actions_total as f64,
        mode_coverage: coverage,
        mean_length: lengths.iter().sum::<usize>() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_roundtrip() {
        for k in EnvKind::ALL {
            assert_eq!(k.as_str().parse::<EnvKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("cartpole".parse::<EnvKind>().is_err());
    }

    #[test]
    fn point_reach_demo_reaches_goal() {
        let d = gen_demos(EnvKind::PointReach, 1, 3).unwrap();
        let last = d.records().last().unwrap();
        let end = [last.obs[0] + last.action[0], last.obs[1] + last.action[1]];
        let goal = [last.obs[2], last.obs[3]];
        let dist = ((end[0] - goal[0]).powi(2) + (end[1] - goal[1]).powi(2)).sqrt();
        assert!(dist < 0.05);
        assert!(d.len() <= PointReachParams::default().max_steps);
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(1, 0), episode_seed(1, 1));
        assert_eq!(episode_seed(1, 0), episode_seed(1, 0));
    }
}
