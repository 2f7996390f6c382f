//! Action generation from a velocity field.
//!
//! The unit flow-time interval is split into `K` equal steps,
//! `tau_k = 1 - k/K`. The deterministic sampler integrates
//! `z <- z - (1/K) u(z, tau_{k+1}, tau_k, o)` from `z ~ N(0, I)` at `tau = 1`.
//! The stochastic sampler adds Gaussian noise around each update so every
//! step is a proper transition density; its log-probabilities feed PPO.
//!
//! The stored log-probabilities and the ones recomputed during PPO updates are
//! produced by the same generic code ([`chain_logprob_with`]) and are therefore
//! bit-identical at unchanged parameters.

use std::f64::consts::PI;

use dmpo_autodiff::{Backend, Eval, Tensor};

use crate::error::{ensure_dim, DmpoError, Result};
use crate::nn::VelocityField;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    steps: usize,
}

impl Schedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(DmpoError::InvalidArgument("number of sampling steps must be >= 1".into()));
        }
        Ok(Schedule { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `tau_k = 1 - k/K`; exactly 1 at `k = 0` and exactly 0 at `k = K`.
    pub fn tau(&self, k: usize) -> f64 {
        1.0 - k as f64 / self.steps as f64
    }

    pub fn taus(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.tau(k)).collect()
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Deterministic mean of step `k`: `z - (1/K) u(z, tau_{k+1}, tau_k, o)`.
pub fn step_mean<B: Backend, F: VelocityField>(
    b: &mut B,
    field: &F,
    schedule: &Schedule,
    k: usize,
    z: &B::Value,
    obs: &B::Value,
) -> Result<B::Value> {
    let rows = b.value(z).rows();
    let r = b.constant(Tensor::full(rows, 1, schedule.tau(k + 1)));
    let tau = b.constant(Tensor::full(rows, 1, schedule.tau(k)));
    let u = field.velocity(b, z, &r, &tau, obs)?;
    let du = b.scale(&u, schedule.step_size())?;
    Ok(b.sub(z, &du)?)
}

/// Generated actions and the number of velocity evaluations per action.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub actions: Tensor,
    pub nfe: usize,
}

fn check_batch<F: VelocityField>(field: &F, obs: &Tensor, z: &Tensor) -> Result<()> {
    ensure_dim("observation", field.obs_dim(), obs.cols())?;
    ensure_dim("initial noise", field.action_dim(), z.cols())?;
    ensure_dim("initial noise batch", obs.rows(), z.rows())
}

/// `K`-step Euler integration from `z_1 ~ N(0, I)`, one row per observation.
pub fn sample_deterministic<F: VelocityField>(field: &F, obs: &Tensor, steps: usize, rng: &mut Rng) -> Result<Sample> {
    Schedule::new(steps)?;
    let z1 = rng::normal_tensor(rng, obs.rows(), field.action_dim());
    sample_deterministic_from(field, obs, z1, steps)
}

/// Deterministic sampling from a given `z_1`.
pub fn sample_deterministic_from<F: VelocityField>(field: &F, obs: &Tensor, z1: Tensor, steps: usize) -> Result<Sample> {
    let schedule = Schedule::new(steps)?;
    check_batch(field, obs, &z1)?;
    let mut z = z1;
    let mut nfe = 0;
    for k in 0..steps {
        z = step_mean(&mut Eval, field, &schedule, k, &z, obs)?;
        nfe += 1;
    }
    Ok(Sample { actions: z, nfe })
}

/// `ln N(next | mean, diag(exp(log_sigma))^2)` per row, `B x 1`.
pub fn transition_logprob<B: Backend>(
    b: &mut B,
    next: &B::Value,
    mean: &B::Value,
    log_sigma: &B::Value,
) -> Result<B::Value> {
    let d = b.value(next).cols();
    ensure_dim("log-sigma width", d, b.value(log_sigma).cols())?;
    let diff = b.sub(next, mean)?;
    let sq = b.square(&diff)?;
    let m2 = b.scale(log_sigma, -2.0)?;
    let inv_var = b.exp(&m2)?;
    let weighted = b.mul(&sq, &inv_var)?;
    let quad = b.sum_rows(&weighted)?;
    let half = b.scale(&quad, -0.5)?;
    let log_det = b.sum(log_sigma)?;
    let centered = b.sub(&half, &log_det)?;
    let norm = b.constant(Tensor::scalar(-0.5 * d as f64 * (2.0 * PI).ln()));
    Ok(b.add(&centered, &norm)?)
}

/// Closed-form Gaussian log-density with isotropic `sigma`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}

/// Standard-normal log-density of the prior draw.
pub fn prior_logprob(a0: &[f64]) -> f64 {
    gaussian_logpdf(a0, &vec![0.0; a0.len()], 1.0)
}

/// Per-row sum of the `K` transition log-densities of a batch of chains.
/// `states` holds `a^0 .. a^K`, each `B x d_a`.
pub fn chain_logprob_with<B: Backend, F: VelocityField>(
    b: &mut B,
    field: &F,
    states: &[B::Value],
    obs: &B::Value,
    log_sigma: &B::Value,
) -> Result<B::Value> {
    if states.len() < 2 {
        return Err(DmpoError::InvalidArgument("a chain needs at least two states".into()));
    }
    let schedule = Schedule::new(states.len() - 1)?;
    let mut total: Option<B::Value> = None;
    for k in 0..schedule.steps() {
        let mean = step_mean(b, field, &schedule, k, &states[k], obs)?;
        let term = transition_logprob(b, &states[k + 1], &mean, log_sigma)?;
        total = Some(match total {
            None => term,
            Some(acc) => b.add(&acc, &term)?,
        });
    }
    Ok(total.expect("at least one step"))
}

/// One stochastic generation: states `a^0 .. a^K`, the per-step means and
/// noise draws, and the log-density bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseChain {
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    /// Per-dimension standard deviation of every transition.
    pub sigma: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub logprob_terms: Vec<f64>,
    /// Sum of the transition terms; excludes the prior.
    pub total_logprob: f64,
    pub prior_logprob: f64,
    pub nfe_used: usize,
}

impl DenoiseChain {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Executed action `a^K`.
    pub fn action(&self) -> &[f64] {
        self.states.last().expect("chain has states")
    }

    /// Transitions plus the standard-normal prior on `a^0`.
    pub fn joint_logprob(&self) -> f64 {
        self.prior_logprob + self.total_logprob
    }

    pub fn log_sigma_row(&self) -> Tensor {
        Tensor::row(&self.log_sigma)
    }
}

pub(crate) fn log_sigma_row(sigma: &[f64], d_a: usize) -> Result<Tensor> {
    ensure_dim("sigma", d_a, sigma.len())?;
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(DmpoError::InvalidArgument(format!("sigma must be positive, got {s}")));
    }
    Ok(Tensor::row(&sigma.iter().map(|s| s.ln()).collect::<Vec<_>>()))
}

/// Stochastic chains with isotropic `sigma`, one per observation row.
pub fn sample_stochastic<F: VelocityField>(
    field: &F,
    obs: &Tensor,
    steps: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Vec<DenoiseChain>> {
    sample_stochastic_diag(field, obs, steps, &vec![sigma; field.action_dim()], rng)
}

/// Stochastic chains with a per-dimension `sigma`.
pub fn sample_stochastic_diag<F: VelocityField>(
    field: &F,
    obs: &Tensor,
    steps: usize,
    sigma: &[f64],
    rng: &mut Rng,
) -> Result<Vec<DenoiseChain>> {
    let log_sigma = log_sigma_row(sigma, field.action_dim())?;
    sample_stochastic_log(field, obs, steps, &log_sigma, rng)
}

/// Stochastic chains parameterized by a `1 x d_a` row of log standard
/// deviations. Stored log-densities use `log_sigma` as given.
pub fn sample_stochastic_log<F: VelocityField>(
    field: &F,
    obs: &Tensor,
    steps: usize,
    log_sigma: &Tensor,
    rng: &mut Rng,
) -> Result<Vec<DenoiseChain>> {
    let schedule = Schedule::new(steps)?;
    let d = field.action_dim();
    ensure_dim("log-sigma width", d, log_sigma.cols())?;
    ensure_dim("log-sigma rows", 1, log_sigma.rows())?;
    let sigma: Vec<f64> = log_sigma.data().iter().map(|l| l.exp()).collect();
    if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(DmpoError::InvalidArgument(format!("sigma must be positive, got {sigma:?}")));
    }
    let n = obs.rows();
    let a0 = rng::normal_tensor(rng, n, d);
    check_batch(field, obs, &a0)?;
    let b = &mut Eval;
    let mut states = vec![a0];
    let mut means = Vec::with_capacity(steps);
    let mut noises = Vec::with_capacity(steps);
    let mut terms = Vec::with_capacity(steps);
    let mut nfe = 0;
    for k in 0..steps {
        let mean = step_mean(b, field, &schedule, k, &states[k], obs)?;
        nfe += 1;
        let step_noise = rng::normal_tensor(rng, n, d);
        let mut next = mean.clone();
        for (i, x) in next.data_mut().iter_mut().enumerate() {
            *x += sigma[i % d] * step_noise.data()[i];
        }
        next.check_finite("stochastic step")?;
        terms.push(transition_logprob(b, &next, &mean, log_sigma)?);
        means.push(mean);
        noises.push(step_noise);
        states.push(next);
    }
    let totals = chain_logprob_with(b, field, &states, obs, log_sigma)?;
    let rows = |t: &Tensor, i: usize| t.row_slice(i).to_vec();
    Ok((0..n)
        .map(|i| DenoiseChain {
            states: states.iter().map(|s| rows(s, i)).collect(),
            means: means.iter().map(|m| rows(m, i)).collect(),
            noise: noises.iter().map(|x| rows(x, i)).collect(),
            sigma: sigma.clone(),
            log_sigma: log_sigma.data().to_vec(),
            logprob_terms: terms.iter().map(|t| t.get(i, 0)).collect(),
            total_logprob: totals.get(i, 0),
            prior_logprob: prior_logprob(states[0].row_slice(i)),
            nfe_used: nfe,
        })
        .collect())
}

/// Recomputes the transition log-density of a stored chain.
pub fn chain_logprob<F: VelocityField>(field: &F, chain: &DenoiseChain, obs: &[f64]) -> Result<f64> {
    ensure_dim("observation", field.obs_dim(), obs.len())?;
    let log_sigma = chain.log_sigma_row();
    ensure_dim("log-sigma width", field.action_dim(), log_sigma.cols())?;
    let states: Vec<Tensor> = chain.states.iter().map(|s| Tensor::row(s)).collect();
    let total = chain_logprob_with(&mut Eval, field, &states, &Tensor::row(obs), &log_sigma)?;
    Ok(total.item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entropy {
    pub per_step: f64,
    pub total: f64,
}

/// Entropy of the Gaussian transitions: `(d/2)(1 + ln 2 pi sigma^2)` per step,
/// `K` times that for the chain.
pub fn policy_entropy(steps: usize, action_dim: usize, sigma: f64) -> Result<Entropy> {
    Schedule::new(steps)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DmpoError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let per_step = 0.5 * action_dim as f64 * (1.0 + (2.0 * PI * sigma * sigma).ln());
    Ok(Entropy {
        per_step,
        total: steps as f64 * per_step,
    })
}

/// Chain entropy for a per-dimension `log_sigma` under any backend, `1 x 1`.
pub fn entropy_with<B: Backend>(b: &mut B, log_sigma: &B::Value, steps: usize) -> Result<B::Value> {
    let d = b.value(log_sigma).cols();
    let s = b.sum(log_sigma)?;
    let c = b.constant(Tensor::scalar(0.5 * d as f64 * (1.0 + (2.0 * PI).ln())));
    let per_step = b.add(&s, &c)?;
    Ok(b.scale(&per_step, steps as f64)?)
}
