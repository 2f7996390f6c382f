//! Shared fixtures: closed-form velocity fields, tiny networks, oracles and
//! finite-difference helpers.
#![allow(dead_code)]

use dmpo_autodiff::{Backend, Gradients, ParamKey, Tensor};
use dmpo_core::nn::{NetConfig, ValueNet, VelocityField, VelocityNet, EXPLORATION_GROUP};
use dmpo_core::ppo::{stage2_gradients, stage2_loss, ActorCritic, Stage2Batch, Stage2Config};
use dmpo_core::sampler;
use dmpo_core::rng::{self, Rng};
use dmpo_core::Result;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

pub fn tiny_config() -> NetConfig {
    NetConfig {
        embed_dim: 3,
        encoder_hidden: vec![4],
        trunk_hidden: vec![5, 4],
        value_hidden: vec![4],
        time_freqs: 2,
        damped_time_features: true,
    }
}

pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    rng::normal_tensor(rng, rows, cols)
}

/// `|a - b| / max(|a|, |b|, floor)` over whole vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central differences of `loss` with respect to every entry of `x`.
pub fn fd_tensor(x: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += FD_STEP;
            let mut minus = x.clone();
            minus.data_mut()[i] -= FD_STEP;
            (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between analytic gradients of a velocity net and
/// central differences of `loss`, over all of its parameters.
pub fn net_grad_error(net: &VelocityNet, grads: &Gradients, loss: impl Fn(&VelocityNet) -> f64) -> f64 {
    let mut probe = net.clone();
    let keys: Vec<_> = probe.params_mut().into_iter().map(|(k, t)| (k, t.len())).collect();
    let mut worst: f64 = 0.0;
    for (p, (key, len)) in keys.into_iter().enumerate() {
        let analytic = grads.get(key).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = probe.params_mut()[p].1.data()[i];
            probe.params_mut()[p].1.data_mut()[i] = orig + FD_STEP;
            let fp = loss(&probe);
            probe.params_mut()[p].1.data_mut()[i] = orig - FD_STEP;
            let fm = loss(&probe);
            probe.params_mut()[p].1.data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn rows_of<B: Backend>(b: &B, v: &B::Value) -> usize {
    b.value(v).rows()
}

/// `u = c` everywhere.
pub struct ConstField {
    pub c: Vec<f64>,
    pub obs_dim: usize,
}

impl VelocityField for ConstField {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.c.len()
    }
    fn velocity<B: Backend>(&self, b: &mut B, z: &B::Value, _: &B::Value, _: &B::Value, _: &B::Value) -> Result<B::Value> {
        let n = rows_of(b, z);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| self.c.clone()).collect();
        Ok(b.constant(Tensor::from_rows(&rows)))
    }
}

/// `u = z - c`: every one-step sample lands on `c`.
pub struct ShiftField {
    pub c: Vec<f64>,
    pub obs_dim: usize,
}

impl VelocityField for ShiftField {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.c.len()
    }
    fn velocity<B: Backend>(&self, b: &mut B, z: &B::Value, _: &B::Value, _: &B::Value, _: &B::Value) -> Result<B::Value> {
        let c = b.constant(Tensor::row(&self.c));
        Ok(b.sub(z, &c)?)
    }
}

/// `u = z`, ignoring times and observation.
pub struct IdentityField {
    pub dim: usize,
    pub obs_dim: usize,
}

impl VelocityField for IdentityField {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.dim
    }
    fn velocity<B: Backend>(&self, _: &mut B, z: &B::Value, _: &B::Value, _: &B::Value, _: &B::Value) -> Result<B::Value> {
        Ok(z.clone())
    }
}

/// Exact average velocity `(z - a) / tau` of the flow that transports the
/// single point `a` to noise.
pub struct SinglePointField {
    pub a: Vec<f64>,
    pub obs_dim: usize,
}

impl VelocityField for SinglePointField {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn action_dim(&self) -> usize {
        self.a.len()
    }
    fn velocity<B: Backend>(&self, b: &mut B, z: &B::Value, _: &B::Value, tau: &B::Value, _: &B::Value) -> Result<B::Value> {
        let a = b.constant(Tensor::row(&self.a));
        let diff = b.sub(z, &a)?;
        let log_tau = b.log(tau)?;
        let neg = b.scale(&log_tau, -1.0)?;
        let inv = b.exp(&neg)?;
        Ok(b.mul(&diff, &inv)?)
    }
}

/// `sum_l (gamma lambda)^l delta_{t+l}` up to the end of the episode.
pub fn gae_oracle(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if dones[t] { 0.0 } else { values[t + 1] };
            rewards[t] + gamma * next - values[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                acc += w * delta[l];
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

pub fn random_episode(r: &mut Rng) -> (Vec<f64>, Vec<f64>, Vec<bool>, f64, f64) {
    let n = r.random_range(1..=64);
    let rewards = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let values = (0..=n).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut dones: Vec<bool> = (0..n).map(|_| r.random_bool(0.05)).collect();
    if r.random_bool(0.5) {
        dones[n - 1] = true;
    }
    (rewards, values, dones, r.random_range(0.0..1.0), r.random_range(0.0..=1.0))
}

pub fn nets(seed: u64, sigma: f64, learnable: bool) -> (ActorCritic, VelocityNet) {
    let cfg = tiny_config();
    let policy = VelocityNet::init(seed, 3, 2, &cfg).unwrap();
    let reference = VelocityNet::init(seed + 100, 3, 2, &cfg).unwrap();
    let value = ValueNet::init(seed, 3, &cfg).unwrap();
    (ActorCritic::new(policy, value, sigma, learnable).unwrap(), reference)
}

/// Chains sampled from `nets`, with advantages and returns drawn at random.
pub fn batch_from(nets: &ActorCritic, m: usize, k: usize, seed: u64) -> Stage2Batch {
    let mut r = rng::seeded(seed);
    let obs = uniform(&mut r, m, 3, -1.0, 1.0);
    let chains = sampler::sample_stochastic_log(&nets.policy, &obs, k, &nets.log_sigma, &mut r).unwrap();
    let states = (0..=k)
        .map(|s| Tensor::from_rows(&chains.iter().map(|c| c.states[s].clone()).collect::<Vec<_>>()))
        .collect();
    Stage2Batch {
        obs,
        states,
        old_logprob: chains.iter().map(|c| c.total_logprob).collect(),
        advantages: (0..m).map(|_| r.random_range(-1.5..1.5)).collect(),
        returns: (0..m).map(|_| r.random_range(-1.0..1.0)).collect(),
        bc_noise: normal(&mut r, m, 2),
    }
}

/// Shifts old log-probabilities so ratios sit away from the clip
/// boundaries, some inside and some outside.
pub fn offset_logprobs(batch: &mut Stage2Batch) {
    for (i, lp) in batch.old_logprob.iter_mut().enumerate() {
        *lp += [0.05, -0.07, 0.6, -0.5][i % 4];
    }
}

/// Largest relative error of the stage-2 gradients over the policy, the
/// critic and, when learnable, the exploration scale.
pub fn stage2_grad_error(
    ac: &ActorCritic,
    reference: &VelocityNet,
    batch: &Stage2Batch,
    cfg: &Stage2Config,
    bc_weight: f64,
) -> f64 {
    let (_, grads) = stage2_gradients(ac, reference, batch, cfg, bc_weight).unwrap();
    let total = |a: &ActorCritic| stage2_loss(a, reference, batch, cfg, bc_weight).unwrap().total;

    let mut worst = net_grad_error(&ac.policy, &grads, |p| {
        let mut a = ac.clone();
        a.policy = p.clone();
        total(&a)
    });
    let mut probe = ac.clone();
    let keys: Vec<(ParamKey, usize)> = probe.value.params_mut().into_iter().map(|(k, t)| (k, t.len())).collect();
    for (p, (key, _)) in keys.into_iter().enumerate() {
        let t = probe.value.params_mut()[p].1.clone();
        let numeric = fd_tensor(&t, |x| {
            let mut a = ac.clone();
            *a.value.params_mut()[p].1 = x.clone();
            total(&a)
        });
        let analytic = grads.get(key).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; numeric.len()]);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let exploration = grads.get(ParamKey::new(EXPLORATION_GROUP, 0));
    if ac.learnable_sigma {
        let numeric = fd_tensor(&ac.log_sigma, |x| {
            let mut a = ac.clone();
            a.log_sigma = x.clone();
            total(&a)
        });
        worst = worst.max(rel_err(exploration.unwrap().data(), &numeric));
    } else if exploration.is_some() {
        return f64::INFINITY;
    }
    worst
}
