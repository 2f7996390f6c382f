//! PPO fine-tuning of a one-step policy through its denoising chain.
//!
//! Each executed action is the last state of a stochastic chain
//! `a^0 -> ... -> a^K`. The chain's summed transition log-density plays the
//! role of the action log-probability, and the advantage of the executed
//! action scales the gradient of the whole chain. A behavior-cloning term
//! keeps the policy near a frozen reference under shared noise.

use std::time::Instant;

use dmpo_autodiff::{AdError, Backend, Eval, Gradients, Graph, ParamKey, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::envs::{episode_seed, Env, EnvKind};
use crate::error::{ensure_dim, DmpoError, Result};
use crate::nn::{NetConfig, ValueNet, VelocityField, VelocityNet, EXPLORATION_GROUP, VALUE_GROUP, VELOCITY_GROUP};
use crate::optim::{clip_group_norm, Adam};
use crate::rng::{self, Rng};
use crate::sampler::{self, DenoiseChain, Schedule};

/// Log-ratios above this are reported as overflow instead of exponentiated.
const MAX_LOG_RATIO: f64 = 700.0;

/// Generalized advantage estimation over one or more concatenated episode
/// segments. `values` has one entry per step plus a bootstrap value at the
/// end; `dones[t]` marks a true termination at step `t`, after which the
/// next value counts as 0 and no credit flows back across the boundary.
///
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    ensure_dim("values (steps + 1)", n + 1, values.len())?;
    ensure_dim("done flags", n, dones.len())?;
    let next: Vec<f64> = (0..n).map(|t| values[t + 1]).collect();
    let ends: Vec<bool> = (0..n).map(|t| dones[t] || t + 1 == n).collect();
    gae_general(rewards, &values[..n], &next, dones, &ends, gamma, lambda)
}

/// GAE with an explicit next-state value per step. `terminal[t]` zeroes the
/// bootstrap; `end[t]` stops the backward recursion (terminal or truncated).
pub fn gae_general(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminal: &[bool],
    end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for (what, len) in [("values", values.len()), ("next values", next_values.len()), ("terminal flags", terminal.len()), ("end flags", end.len())] {
        ensure_dim(what, n, len)?;
    }
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let boot = if terminal[t] { 0.0 } else { gamma * next_values[t] };
        let delta = rewards[t] + boot - values[t];
        if end[t] {
            carry = 0.0;
        }
        carry = delta + gamma * lambda * carry;
        adv[t] = carry;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// `exp(new - old)`, rejecting non-finite inputs and overflowing ratios.
pub fn ppo_ratio(new_logprob: f64, old_logprob: f64) -> Result<f64> {
    if !new_logprob.is_finite() || !old_logprob.is_finite() {
        return Err(DmpoError::InvalidArgument(format!(
            "log-probabilities must be finite, got {new_logprob} and {old_logprob}"
        )));
    }
    let d = new_logprob - old_logprob;
    if d > MAX_LOG_RATIO {
        return Err(DmpoError::RatioOverflow { log_ratio: d });
    }
    Ok(d.exp())
}

fn clip_ratio(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

/// `mean(max(-A rho, -A clip(rho, 1-eps, 1+eps)))`.
pub fn clipped_pg_loss(ratios: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    ensure_dim("advantages", ratios.len(), advantages.len())?;
    if ratios.is_empty() {
        return Err(DmpoError::InvalidArgument("empty batch".into()));
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (-a * r).max(-a * clip_ratio(r, eps)))
        .sum();
    Ok(total / ratios.len() as f64)
}

/// `mean(-A rho)`, the surrogate without clipping.
pub fn unclipped_pg_loss(ratios: &[f64], advantages: &[f64]) -> Result<f64> {
    ensure_dim("advantages", ratios.len(), advantages.len())?;
    if ratios.is_empty() {
        return Err(DmpoError::InvalidArgument("empty batch".into()));
    }
    Ok(ratios.iter().zip(advantages).map(|(r, a)| -a * r).sum::<f64>() / ratios.len() as f64)
}

/// `0.5 mean((V - R)^2)`.
pub fn value_loss(values: &[f64], returns: &[f64]) -> Result<f64> {
    ensure_dim("returns", values.len(), returns.len())?;
    if values.is_empty() {
        return Err(DmpoError::InvalidArgument("empty batch".into()));
    }
    Ok(0.5 * values.iter().zip(returns).map(|(v, r)| (v - r) * (v - r)).sum::<f64>() / values.len() as f64)
}

/// Piecewise-linear decay of the behavior-cloning weight: `init` before
/// `start`, `final` from `end` on, linear in between.
pub fn bc_schedule(n: usize, init: f64, final_: f64, start: usize, end: usize) -> Result<f64> {
    if start >= end {
        return Err(DmpoError::InvalidArgument(format!(
            "bc schedule needs start < end, got {start} and {end}"
        )));
    }
    Ok(if n < start {
        init
    } else if n < end {
        init + (final_ - init) * (n - start) as f64 / (end - start) as f64
    } else {
        final_
    })
}

/// One-step actions of `reference` and `current` from the same `z_1`, and
/// `mean_i |a_ref - a_cur|^2` as a graph value. Only `current` is recorded
/// as trainable.
pub fn bc_loss_with<B: Backend, F: VelocityField>(
    b: &mut B,
    reference: &F,
    current: &F,
    obs: &Tensor,
    z1: &Tensor,
) -> Result<B::Value> {
    ensure_dim("reference action", current.action_dim(), reference.action_dim())?;
    ensure_dim("reference observation", current.obs_dim(), reference.obs_dim())?;
    let one = Schedule::new(1)?;
    let target = sampler::sample_deterministic_from(reference, obs, z1.clone(), 1)?.actions;
    let z = b.constant(z1.clone());
    let o = b.constant(obs.clone());
    let a = sampler::step_mean(b, current, &one, 0, &z, &o)?;
    let t = b.constant(target);
    let diff = b.sub(&a, &t)?;
    let sq = b.square(&diff)?;
    let total = b.sum(&sq)?;
    Ok(b.scale(&total, 1.0 / obs.rows() as f64)?)
}

pub fn bc_loss<F: VelocityField>(reference: &F, current: &F, obs: &Tensor, z1: &Tensor) -> Result<f64> {
    Ok(bc_loss_with(&mut Eval, reference, current, obs, z1)?.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub bc_init: f64,
    pub bc_final: f64,
    pub bc_start: usize,
    pub bc_end: usize,
    /// Denoising steps `K` of the sampling chain.
    pub steps: usize,
    pub sigma: f64,
    pub learnable_sigma: bool,
    pub iterations: usize,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    /// Environment steps per environment and iteration.
    pub rollout_steps: usize,
    pub num_envs: usize,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            bc_init: 1.0,
            bc_final: 0.0,
            bc_start: 0,
            bc_end: 100,
            steps: 1,
            sigma: 0.01,
            learnable_sigma: false,
            iterations: 200,
            update_epochs: 4,
            minibatch_size: 128,
            rollout_steps: 64,
            num_envs: 8,
            learning_rate: 3e-4,
            value_learning_rate: 1e-3,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DmpoError::Config(format!("stage2.{m}")));
        let finite_nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return bad("clip_eps must be > 0");
        }
        for (name, x) in [
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("bc_init", self.bc_init),
            ("bc_final", self.bc_final),
        ] {
            if !finite_nonneg(x) {
                return Err(DmpoError::Config(format!("stage2.{name} must be >= 0")));
            }
        }
        if self.bc_start >= self.bc_end {
            return bad("bc_start must be < bc_end");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be > 0");
        }
        if self.update_epochs == 0 || self.minibatch_size == 0 || self.rollout_steps == 0 || self.num_envs == 0 {
            return bad("update_epochs, minibatch_size, rollout_steps and num_envs must be >= 1");
        }
        for (name, x) in [
            ("learning_rate", self.learning_rate),
            ("value_learning_rate", self.value_learning_rate),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(DmpoError::Config(format!("stage2.{name} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn bc_weight(&self, iteration: usize) -> Result<f64> {
        bc_schedule(iteration, self.bc_init, self.bc_final, self.bc_start, self.bc_end)
    }
}

/// Trainable state of fine-tuning: policy, critic and exploration scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    pub policy: VelocityNet,
    pub value: ValueNet,
    /// `1 x d_a` log standard deviation of the chain transitions.
    pub log_sigma: Tensor,
    pub learnable_sigma: bool,
}

impl ActorCritic {
    pub fn new(policy: VelocityNet, value: ValueNet, sigma: f64, learnable_sigma: bool) -> Result<Self> {
        ensure_dim("critic observation", policy.obs_dim(), value.obs_dim())?;
        let log_sigma = sampler::log_sigma_row(&vec![sigma; policy.action_dim()], policy.action_dim())?;
        Ok(ActorCritic {
            policy,
            value,
            log_sigma,
            learnable_sigma,
        })
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|l| l.exp()).collect()
    }

    fn log_sigma_value<B: Backend>(&self, b: &mut B) -> B::Value {
        if self.learnable_sigma {
            b.parameter(ParamKey::new(EXPLORATION_GROUP, 0), &self.log_sigma)
        } else {
            b.constant(self.log_sigma.clone())
        }
    }
}

/// A minibatch of collected transitions, laid out for the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Batch {
    pub obs: Tensor,
    /// `a^0 .. a^K`, each `M x d_a`.
    pub states: Vec<Tensor>,
    pub old_logprob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Shared `z_1` for the behavior-cloning term, `M x d_a`.
    pub bc_noise: Tensor,
}

impl Stage2Batch {
    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }

    fn validate(&self, d_a: usize) -> Result<()> {
        let m = self.len();
        if m == 0 || self.states.len() < 2 {
            return Err(DmpoError::InvalidArgument("empty stage-2 batch".into()));
        }
        for s in &self.states {
            ensure_dim("chain state batch", m, s.rows())?;
            ensure_dim("chain state", d_a, s.cols())?;
        }
        ensure_dim("old log-probs", m, self.old_logprob.len())?;
        ensure_dim("advantages", m, self.advantages.len())?;
        ensure_dim("returns", m, self.returns.len())?;
        ensure_dim("bc noise batch", m, self.bc_noise.rows())?;
        ensure_dim("bc noise", d_a, self.bc_noise.cols())
    }
}

/// Scalar loss components. `total` is
/// `pg + value_coef * value + entropy_coef * entropy + bc_weight * bc`, where
/// `entropy` is the negated chain entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Losses {
    pub pg: f64,
    pub value: f64,
    pub entropy: f64,
    pub bc: f64,
    pub bc_weight: f64,
    pub total: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

struct Stage2Graph {
    total: Var,
    losses: Stage2Losses,
}

fn build_stage2(
    g: &mut Graph,
    nets: &ActorCritic,
    reference: &VelocityNet,
    batch: &Stage2Batch,
    config: &Stage2Config,
    bc_weight: f64,
) -> Result<Stage2Graph> {
    batch.validate(nets.policy.action_dim())?;
    let m = batch.len();
    let obs = g.constant(batch.obs.clone());
    let states: Vec<Var> = batch.states.iter().map(|s| g.constant(s.clone())).collect();
    let log_sigma = nets.log_sigma_value(g);
    let new_logp = sampler::chain_logprob_with(g, &nets.policy, &states, &obs, &log_sigma)?;

    // Surrogate: the clipped branch is chosen only where it is strictly larger;
    // there the ratio is outside the trust region and the branch is constant.
    let new_vals = g.value(&new_logp).data().to_vec();
    let mut ratios = Vec::with_capacity(m);
    for (n, o) in new_vals.iter().zip(&batch.old_logprob) {
        ratios.push(ppo_ratio(*n, *o)?);
    }
    let eps = config.clip_eps;
    let mut mask = vec![0.0; m];
    let mut clipped_part = vec![0.0; m];
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for i in 0..m {
        let (r, a) = (ratios[i], batch.advantages[i]);
        let unclipped = -a * r;
        let alt = -a * clip_ratio(r, eps);
        if alt > unclipped {
            clipped_part[i] = alt;
        } else {
            mask[i] = 1.0;
        }
        if (r - 1.0).abs() > eps {
            clipped += 1;
        }
        kl += batch.old_logprob[i] - new_vals[i];
    }
    let old = g.constant(Tensor::column(&batch.old_logprob));
    let log_ratio = g.sub(&new_logp, &old)?;
    let ratio = g.exp(&log_ratio)?;
    let neg_adv = g.constant(Tensor::column(&batch.advantages.iter().map(|a| -a).collect::<Vec<_>>()));
    let surr = g.mul(&ratio, &neg_adv)?;
    let mask_v = g.constant(Tensor::column(&mask));
    let active = g.mul(&surr, &mask_v)?;
    let fixed = g.constant(Tensor::column(&clipped_part));
    let per_row = g.add(&active, &fixed)?;
    let pg = g.mean(&per_row)?;

    let v = nets.value.forward(g, &obs)?;
    let ret = g.constant(Tensor::column(&batch.returns));
    let v_err = g.sub(&v, &ret)?;
    let v_sq = g.square(&v_err)?;
    let v_mean = g.mean(&v_sq)?;
    let v_loss = g.scale(&v_mean, 0.5)?;

    let entropy = sampler::entropy_with(g, &log_sigma, batch.states.len() - 1)?;
    let ent_loss = g.scale(&entropy, -1.0)?;

    let bc = bc_loss_with(g, reference, &nets.policy, &batch.obs, &batch.bc_noise)?;

    let mut total = pg;
    for (term, coef) in [(v_loss, config.value_coef), (ent_loss, config.entropy_coef), (bc, bc_weight)] {
        let scaled = g.scale(&term, coef)?;
        total = g.add(&total, &scaled)?;
    }
    let item = |g: &Graph, v: &Var| g.value(v).item();
    let losses = Stage2Losses {
        pg: item(g, &pg),
        value: item(g, &v_loss),
        entropy: item(g, &ent_loss),
        bc: item(g, &bc),
        bc_weight,
        total: item(g, &total),
        clip_frac: clipped as f64 / m as f64,
        approx_kl: kl / m as f64,
    };
    Ok(Stage2Graph { total, losses })
}

/// Loss components at the current parameters.
pub fn stage2_loss(
    nets: &ActorCritic,
    reference: &VelocityNet,
    batch: &Stage2Batch,
    config: &Stage2Config,
    bc_weight: f64,
) -> Result<Stage2Losses> {
    let mut g = Graph::new();
    Ok(build_stage2(&mut g, nets, reference, batch, config, bc_weight)?.losses)
}

/// Loss components and gradients for policy, critic and (if learnable)
/// exploration parameters. The reference network receives no gradient.
pub fn stage2_gradients(
    nets: &ActorCritic,
    reference: &VelocityNet,
    batch: &Stage2Batch,
    config: &Stage2Config,
    bc_weight: f64,
) -> Result<(Stage2Losses, Gradients)> {
    let mut g = Graph::new();
    let built = build_stage2(&mut g, nets, reference, batch, config, bc_weight)?;
    let grads = g.backward_scalar(built.total)?.gradients();
    Ok((built.losses, grads))
}

/// One collected environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub chain: DenoiseChain,
    pub reward: f64,
    pub value: f64,
    pub next_value: f64,
    pub terminal: bool,
    /// Episode ended here (terminal or truncated) or the segment was cut.
    pub end: bool,
    pub advantage: f64,
    pub ret: f64,
}

/// Rollout of `num_envs` environments, stored per environment in time order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Persistent lockstep environments. Environment `i` draws its episode reset
/// seeds from [`episode_seed`]`(seed, i * 2^20 + episode)`.
pub struct VecEnv {
    envs: Vec<Box<dyn Env>>,
    obs: Vec<Vec<f64>>,
    episode: Vec<u64>,
    ret: Vec<f64>,
    seed: u64,
}

impl VecEnv {
    pub fn new(kind: EnvKind, count: usize, seed: u64) -> Self {
        let mut envs: Vec<Box<dyn Env>> = (0..count).map(|_| kind.make()).collect();
        let obs = envs
            .iter_mut()
            .enumerate()
            .map(|(i, e)| e.reset(episode_seed(seed, (i as u64) << 20)))
            .collect();
        VecEnv {
            envs,
            obs,
            episode: vec![0; count],
            ret: vec![0.0; count],
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    fn obs_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.obs)
    }
}

/// Collects `steps` transitions from every environment with the stochastic
/// chain sampler, then fills advantages and returns.
pub fn collect_rollout(
    nets: &ActorCritic,
    envs: &mut VecEnv,
    steps: usize,
    config: &Stage2Config,
    rng: &mut Rng,
) -> Result<RolloutBatch> {
    let n_env = envs.len();
    let mut per_env: Vec<Vec<Transition>> = (0..n_env).map(|_| Vec::with_capacity(steps)).collect();
    let mut out = RolloutBatch::default();
    for t in 0..steps {
        let obs = envs.obs_tensor();
        let values = nets.value.predict(&obs)?;
        let chains = sampler::sample_stochastic_log(&nets.policy, &obs, config.steps, &nets.log_sigma, rng)?;
        let mut next_obs = Vec::with_capacity(n_env);
        let mut results = Vec::with_capacity(n_env);
        for (i, chain) in chains.iter().enumerate() {
            let step = envs.envs[i].step(chain.action())?;
            next_obs.push(step.obs.clone());
            results.push(step);
        }
        let next_values = nets.value.predict(&Tensor::from_rows(&next_obs))?;
        for (i, (chain, step)) in chains.into_iter().zip(results).enumerate() {
            envs.ret[i] += step.reward;
            let done = step.done();
            per_env[i].push(Transition {
                obs: envs.obs[i].clone(),
                chain,
                reward: step.reward,
                value: values.get(i, 0),
                next_value: next_values.get(i, 0),
                terminal: step.terminated,
                end: done || t + 1 == steps,
                advantage: 0.0,
                ret: 0.0,
            });
            if done {
                out.episode_returns.push(envs.ret[i]);
                out.episode_successes.push(step.success);
                envs.ret[i] = 0.0;
                envs.episode[i] += 1;
                let s = episode_seed(envs.seed, ((i as u64) << 20) + envs.episode[i]);
                envs.obs[i] = envs.envs[i].reset(s);
            } else {
                envs.obs[i] = step.obs;
            }
        }
    }
    for traj in &mut per_env {
        let col = |f: fn(&Transition) -> f64| traj.iter().map(f).collect::<Vec<_>>();
        let (rewards, values, next) = (col(|x| x.reward), col(|x| x.value), col(|x| x.next_value));
        let terminal: Vec<bool> = traj.iter().map(|x| x.terminal).collect();
        let end: Vec<bool> = traj.iter().map(|x| x.end).collect();
        let (adv, ret) = gae_general(&rewards, &values, &next, &terminal, &end, config.gamma, config.gae_lambda)?;
        for (x, (a, r)) in traj.iter_mut().zip(adv.into_iter().zip(ret)) {
            x.advantage = a;
            x.ret = r;
        }
    }
    out.transitions = per_env.into_iter().flatten().collect();
    Ok(out)
}

/// Per-iteration metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub iter: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub pg: f64,
    pub v: f64,
    pub ent: f64,
    pub bc: f64,
    pub lambda_bc: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

pub struct Finetuned {
    pub nets: ActorCritic,
    /// The frozen reference used by the behavior-cloning term.
    pub reference: VelocityNet,
    pub metrics: Vec<Stage2Row>,
    pub policy_optimizer: Adam,
    pub value_optimizer: Adam,
    pub rng: Rng,
}

/// Fresh critic and exploration scale around a pre-trained policy.
pub fn init_actor_critic(policy: VelocityNet, net_config: &NetConfig, config: &Stage2Config) -> Result<ActorCritic> {
    let value = ValueNet::init(config.seed, policy.obs_dim(), net_config)?;
    ActorCritic::new(policy, value, config.sigma, config.learnable_sigma)
}

fn minibatch(
    batch: &RolloutBatch,
    idx: &[usize],
    adv: &[f64],
    d_a: usize,
    rng: &mut Rng,
) -> Result<Stage2Batch> {
    let tr: Vec<&Transition> = idx.iter().map(|&i| &batch.transitions[i]).collect();
    let k = tr[0].chain.steps();
    let states = (0..=k)
        .map(|s| Tensor::from_rows(&tr.iter().map(|t| t.chain.states[s].clone()).collect::<Vec<_>>()))
        .collect();
    Ok(Stage2Batch {
        obs: Tensor::from_rows(&tr.iter().map(|t| t.obs.clone()).collect::<Vec<_>>()),
        states,
        old_logprob: tr.iter().map(|t| t.chain.total_logprob).collect(),
        advantages: idx.iter().map(|&i| adv[i]).collect(),
        returns: tr.iter().map(|t| t.ret).collect(),
        bc_noise: rng::normal_tensor(rng, idx.len(), d_a),
    })
}

fn normalized(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

fn diverged(iter: usize) -> impl Fn(DmpoError) -> DmpoError {
    move |e| match e {
        DmpoError::Autodiff(AdError::NonFinite { op }) => DmpoError::Diverged {
            step: iter,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// PPO on `kind`, starting from `nets`, regularized toward `reference`.
pub fn finetune(nets: ActorCritic, reference: &VelocityNet, kind: EnvKind, config: &Stage2Config) -> Result<Finetuned> {
    finetune_with(nets, reference, kind, config, |_| {})
}

pub fn finetune_with(
    mut nets: ActorCritic,
    reference: &VelocityNet,
    kind: EnvKind,
    config: &Stage2Config,
    mut on_iter: impl FnMut(&Stage2Row),
) -> Result<Finetuned> {
    config.validate()?;
    ensure_dim("environment observation", kind.obs_dim(), nets.policy.obs_dim())?;
    ensure_dim("environment action", kind.action_dim(), nets.policy.action_dim())?;
    let reference = reference.clone();
    let d_a = nets.policy.action_dim();
    let mut policy_opt = Adam::with_lr(config.learning_rate)?;
    let mut value_opt = Adam::with_lr(config.value_learning_rate)?;
    let mut rng = rng::stream(config.seed, rng::streams::STAGE2);
    let mut envs = VecEnv::new(kind, config.num_envs, config.seed);
    let mut metrics = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    for iter in 0..config.iterations {
        let bc_weight = config.bc_weight(iter)?;
        let batch = collect_rollout(&nets, &mut envs, config.rollout_steps, config, &mut rng).map_err(diverged(iter))?;
        let raw: Vec<f64> = batch.transitions.iter().map(|t| t.advantage).collect();
        let adv = if config.normalize_advantages { normalized(&raw) } else { raw };
        let mut sums = Stage2Losses::default();
        let mut count = 0usize;
        let mut order: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..config.update_epochs {
            crate::meanflow::shuffle(&mut order, &mut rng);
            for idx in order.chunks(config.minibatch_size) {
                let mb = minibatch(&batch, idx, &adv, d_a, &mut rng)?;
                let (losses, mut grads) =
                    stage2_gradients(&nets, &reference, &mb, config, bc_weight).map_err(diverged(iter))?;
                if !losses.total.is_finite() {
                    return Err(DmpoError::Diverged {
                        step: iter,
                        detail: format!("stage-2 loss {}", losses.total),
                    });
                }
                for group in [VELOCITY_GROUP, VALUE_GROUP, EXPLORATION_GROUP] {
                    clip_group_norm(&mut grads, group, config.max_grad_norm);
                }
                let mut policy_params = nets.policy.params_mut();
                if nets.learnable_sigma {
                    policy_params.push((ParamKey::new(EXPLORATION_GROUP, 0), &mut nets.log_sigma));
                }
                policy_opt.step(policy_params, &grads);
                value_opt.step(nets.value.params_mut(), &grads);
                sums.pg += losses.pg;
                sums.value += losses.value;
                sums.entropy += losses.entropy;
                sums.bc += losses.bc;
                sums.clip_frac += losses.clip_frac;
                sums.approx_kl += losses.approx_kl;
                count += 1;
            }
        }
        let c = count as f64;
        let episodes = batch.episode_returns.len();
        let (mean_return, success_rate) = if episodes == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (
                batch.episode_returns.iter().sum::<f64>() / episodes as f64,
                batch.episode_successes.iter().filter(|&&s| s).count() as f64 / episodes as f64,
            )
        };
        let row = Stage2Row {
            iter,
            mean_return,
            success_rate,
            pg: sums.pg / c,
            v: sums.value / c,
            ent: sums.entropy / c,
            bc: sums.bc / c,
            lambda_bc: bc_weight,
            clip_frac: sums.clip_frac / c,
            approx_kl: sums.approx_kl / c,
        };
        log::debug!(
            "iter {} return {:.3} success {:.2} bc {:.4} kl {:.5} ({} ms)",
            iter,
            row.mean_return,
            row.success_rate,
            row.bc,
            row.approx_kl,
            start.elapsed().as_millis()
        );
        on_iter(&row);
        metrics.push(row);
    }
    Ok(Finetuned {
        nets,
        reference,
        metrics,
        policy_optimizer: policy_opt,
        value_optimizer: value_opt,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_hand_cases() {
        let (a, r) = gae(&[1.0], &[0.5, 0.0], &[true], 0.9, 0.8).unwrap();
        assert_eq!(a, vec![0.5]);
        assert_eq!(r, vec![1.0]);
        let (a, _) = gae(&[1.0, 1.0], &[0.0, 0.0, 0.0], &[false, true], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![2.0, 1.0]);
        let (a, _) = gae(&[1.0, 2.0], &[0.5, 0.25, 1.0], &[false, false], 0.9, 0.0).unwrap();
        assert_eq!(a, vec![1.0 + 0.9 * 0.25 - 0.5, 2.0 + 0.9 * 1.0 - 0.25]);
        assert!(gae(&[1.0], &[0.0], &[false], 0.9, 0.9).is_err());
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(ppo_ratio(-1.3, -1.3).unwrap(), 1.0);
        assert!((ppo_ratio(2f64.ln(), 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(ppo_ratio(1000.0, 0.0), Err(DmpoError::RatioOverflow { .. })));
    }

    #[test]
    fn clipped_surrogate_hand_cases() {
        assert_eq!(clipped_pg_loss(&[2.0], &[1.0], 0.2).unwrap(), -1.2);
        assert_eq!(clipped_pg_loss(&[0.5], &[-1.0], 0.2).unwrap(), 0.8);
        let adv = [0.3, -1.2, 2.0];
        assert_eq!(clipped_pg_loss(&[1.0; 3], &adv, 0.2).unwrap(), unclipped_pg_loss(&[1.0; 3], &adv).unwrap());
    }

    #[test]
    fn value_loss_cases() {
        assert_eq!(value_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(value_loss(&[0.0], &[2.0]).unwrap(), 2.0);
    }

    #[test]
    fn bc_schedule_branches() {
        assert_eq!(bc_schedule(3, 1.0, 0.0, 10, 20).unwrap(), 1.0);
        assert_eq!(bc_schedule(15, 1.0, 0.0, 10, 20).unwrap(), 0.5);
        assert_eq!(bc_schedule(20, 1.0, 0.0, 10, 20).unwrap(), 0.0);
        assert_eq!(bc_schedule(99, 1.0, 0.25, 10, 20).unwrap(), 0.25);
        assert!(bc_schedule(0, 1.0, 0.0, 5, 5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(Stage2Config::default().validate().is_ok());
        let bad = Stage2Config {
            gamma: 1.0,
            ..Stage2Config::default()
        };
        assert!(bad.validate().is_err());
    }
}
