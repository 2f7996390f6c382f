//! Average-velocity (MeanFlow) pre-training.
//!
//! Actions are transported to noise along `z_tau = (1 - tau) a + tau eps`,
//! whose instantaneous velocity is the constant `v = eps - a`. The network
//! learns the average velocity over `[r, tau]` by regressing onto
//! `u_tgt = v - (tau - r) du/dtau`, where the total derivative is a single
//! forward-mode pass along the tangent `(v, 0, 1)` and the target is held
//! constant during backpropagation.

use std::time::Instant;

use dmpo_autodiff::{AdError, Backend, Dual, DualTensor, Eval, Gradients, Graph, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::dispersive::{self, DispersiveConfig, DispersiveKind};
use crate::error::{ensure_dim, DmpoError, Result};
use crate::nn::{NetConfig, VelocityField, VelocityNet};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePair {
    pub r: f64,
    pub tau: f64,
}

impl TimePair {
    pub fn new(r: f64, tau: f64) -> Result<Self> {
        crate::nn::check_times(r, tau)?;
        Ok(TimePair { r, tau })
    }

    /// Sorted sigmoids of two normal draws.
    pub fn from_normals(xi1: f64, xi2: f64) -> Self {
        let (a, b) = (sigmoid(xi1), sigmoid(xi2));
        TimePair {
            r: a.min(b),
            tau: a.max(b),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logit-normal time pair; with probability `rho_inst` the interval is
/// collapsed to `r = tau` so the instantaneous velocity is supervised too.
pub fn sample_time_pair(rng: &mut Rng, rho_inst: f64) -> TimePair {
    let xi1 = rng::normal(rng);
    let xi2 = rng::normal(rng);
    let collapse: f64 = rng.random();
    let mut pair = TimePair::from_normals(xi1, xi2);
    if collapse < rho_inst {
        pair.r = pair.tau;
    }
    pair
}

/// `(1 - tau) a + tau eps`.
pub fn interpolate(a: &Tensor, eps: &Tensor, tau: f64) -> Result<Tensor> {
    interpolate_rows(a, eps, &vec![tau; a.rows()])
}

/// Row-wise interpolation with one flow time per row.
pub fn interpolate_rows(a: &Tensor, eps: &Tensor, taus: &[f64]) -> Result<Tensor> {
    if a.shape() != eps.shape() {
        return Err(DmpoError::InvalidArgument(format!(
            "action shape {:?} does not match noise shape {:?}",
            a.shape(),
            eps.shape()
        )));
    }
    ensure_dim("flow times", a.rows(), taus.len())?;
    if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(DmpoError::InvalidArgument(format!("flow time {t} outside [0, 1]")));
    }
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&ai, &ei))| {
            let t = taus[i / cols];
            (1.0 - t) * ai + t * ei
        })
        .collect();
    Ok(Tensor::new(a.rows(), cols, data)?)
}

/// One minibatch of the pre-training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Batch {
    pub obs: Tensor,
    pub actions: Tensor,
    pub noise: Tensor,
    pub times: Vec<TimePair>,
}

impl Stage1Batch {
    pub fn new(obs: Tensor, actions: Tensor, noise: Tensor, times: Vec<TimePair>) -> Result<Self> {
        let n = obs.rows();
        ensure_dim("action batch", n, actions.rows())?;
        ensure_dim("noise batch", n, noise.rows())?;
        ensure_dim("noise width", actions.cols(), noise.cols())?;
        ensure_dim("time pairs", n, times.len())?;
        if n == 0 {
            return Err(DmpoError::InvalidArgument("empty batch".into()));
        }
        for t in &times {
            TimePair::new(t.r, t.tau)?;
        }
        Ok(Stage1Batch {
            obs,
            actions,
            noise,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }

    pub fn r_column(&self) -> Tensor {
        Tensor::column(&self.times.iter().map(|t| t.r).collect::<Vec<_>>())
    }

    pub fn tau_column(&self) -> Tensor {
        Tensor::column(&self.times.iter().map(|t| t.tau).collect::<Vec<_>>())
    }

    /// `z_tau` for every row.
    pub fn noisy_actions(&self) -> Result<Tensor> {
        let taus: Vec<f64> = self.times.iter().map(|t| t.tau).collect();
        interpolate_rows(&self.actions, &self.noise, &taus)
    }

    /// Instantaneous velocity `eps - a`.
    pub fn flow_velocity(&self) -> Tensor {
        self.noise.sub(&self.actions)
    }
}

/// Total derivative of the field along `(dz, dr, dtau) = (v, 0, 1)`, with the
/// observation held fixed. Returns `(u, du/dtau)`.
pub fn velocity_and_time_derivative<F: VelocityField>(
    field: &F,
    z: &Tensor,
    r: &Tensor,
    tau: &Tensor,
    obs: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = z.rows();
    let zd = DualTensor::new(z.clone(), v.clone())?;
    let rd = DualTensor::new(r.clone(), Tensor::zeros(n, 1))?;
    let td = DualTensor::new(tau.clone(), Tensor::full(n, 1, 1.0))?;
    let od = DualTensor::constant(obs.clone());
    let out = field.velocity(&mut Dual, &zd, &rd, &td, &od)?;
    Ok((out.primal, out.tangent))
}

/// `u_tgt = v - (tau - r) du/dtau`, a plain tensor with no link to parameters.
pub fn target_velocity<F: VelocityField>(
    field: &F,
    z: &Tensor,
    r: &Tensor,
    tau: &Tensor,
    obs: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let (_, du) = velocity_and_time_derivative(field, z, r, tau, obs, v)?;
    let cols = v.cols();
    let data = v
        .data()
        .iter()
        .zip(du.data())
        .enumerate()
        .map(|(i, (&vi, &di))| {
            let row = i / cols;
            vi - (tau.get(row, 0) - r.get(row, 0)) * di
        })
        .collect();
    Ok(Tensor::new(v.rows(), cols, data)?)
}

/// Target velocity for a whole batch.
pub fn batch_target<F: VelocityField>(field: &F, batch: &Stage1Batch) -> Result<Tensor> {
    let z = batch.noisy_actions()?;
    target_velocity(
        field,
        &z,
        &batch.r_column(),
        &batch.tau_column(),
        &batch.obs,
        &batch.flow_velocity(),
    )
}

/// `(1/B) sum_i |u_i - target_i|^2` under any backend; `target` enters as a
/// constant.
pub fn regression_loss<B: Backend>(b: &mut B, u: &B::Value, target: &Tensor) -> Result<B::Value> {
    let rows = target.rows();
    let t = b.constant(target.clone());
    let t = b.stop_gradient(&t)?;
    let diff = b.sub(u, &t)?;
    let sq = b.square(&diff)?;
    let total = b.sum(&sq)?;
    Ok(b.scale(&total, 1.0 / rows as f64)?)
}

fn batch_inputs<B: Backend>(b: &mut B, batch: &Stage1Batch) -> Result<[B::Value; 4]> {
    Ok([
        b.constant(batch.noisy_actions()?),
        b.constant(batch.r_column()),
        b.constant(batch.tau_column()),
        b.constant(batch.obs.clone()),
    ])
}

/// Pre-training regression loss of `field` on `batch`.
pub fn mf_loss<F: VelocityField>(field: &F, batch: &Stage1Batch) -> Result<f64> {
    let target = batch_target(field, batch)?;
    let b = &mut Eval;
    let [z, r, tau, obs] = batch_inputs(b, batch)?;
    let u = field.velocity(b, &z, &r, &tau, &obs)?;
    Ok(regression_loss(b, &u, &target)?.item())
}

/// Loss and parameter gradients, the target held fixed.
pub fn mf_loss_gradients<F: VelocityField>(field: &F, batch: &Stage1Batch) -> Result<(f64, Gradients)> {
    let target = batch_target(field, batch)?;
    let mut g = Graph::new();
    let [z, r, tau, obs] = batch_inputs(&mut g, batch)?;
    let u = field.velocity(&mut g, &z, &r, &tau, &obs)?;
    let loss = regression_loss(&mut g, &u, &target)?;
    let value = g.value(&loss).item();
    Ok((value, g.backward_scalar(loss)?.gradients()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Losses {
    pub mf: f64,
    pub disp: f64,
    pub total: f64,
}

/// `L_mf + alpha * L_disp` for a [`VelocityNet`], with the dispersive term on
/// the observation embeddings of the batch.
pub fn stage1_gradients(
    net: &VelocityNet,
    batch: &Stage1Batch,
    alpha: f64,
    disp: &DispersiveConfig,
) -> Result<(Stage1Losses, Gradients)> {
    let target = batch_target(net, batch)?;
    let mut g = Graph::new();
    let [z, r, tau, obs] = batch_inputs(&mut g, batch)?;
    let out = net.forward(&mut g, &z, &r, &tau, &obs)?;
    let mf = regression_loss(&mut g, &out.velocity, &target)?;
    let (total, disp_value) = if alpha == 0.0 || disp.kind == DispersiveKind::None {
        (mf, 0.0)
    } else {
        let d = dispersive::dispersive_loss(&mut g, &out.embedding, disp)?;
        let scaled = g.scale(&d, alpha)?;
        let dv = g.value(&d).item();
        (g.add(&mf, &scaled)?, dv)
    };
    let losses = Stage1Losses {
        mf: g.value(&mf).item(),
        disp: disp_value,
        total: g.value(&total).item(),
    };
    Ok((losses, g.backward_scalar(total)?.gradients()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub alpha_disp: f64,
    pub disp_kind: DispersiveKind,
    pub disp_temperature: f64,
    pub hinge_margin: f64,
    pub rho_inst: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Relative singular-value threshold of the effective-rank diagnostic.
    pub d_eff_tol: f64,
    /// Observations used for the per-epoch effective-rank diagnostic.
    pub probe_size: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            alpha_disp: 0.1,
            disp_kind: DispersiveKind::NceL2,
            disp_temperature: 0.1,
            hinge_margin: 1.0,
            rho_inst: 0.1,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            d_eff_tol: 1e-3,
            probe_size: 256,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DmpoError::Config(format!("stage1.{m}")));
        if !(self.alpha_disp >= 0.0 && self.alpha_disp.is_finite()) {
            return bad("alpha_disp must be >= 0");
        }
        if !(self.disp_temperature > 0.0 && self.disp_temperature.is_finite()) {
            return bad("disp_temperature must be > 0");
        }
        if !(self.hinge_margin > 0.0 && self.hinge_margin.is_finite()) {
            return bad("hinge_margin must be > 0");
        }
        if !(0.0..=1.0).contains(&self.rho_inst) {
            return bad("rho_inst must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.alpha_disp > 0.0 && self.disp_kind != DispersiveKind::None && self.batch_size < 2 {
            return bad("batch_size must be >= 2 when a dispersive loss is active");
        }
        if !(self.d_eff_tol > 0.0 && self.d_eff_tol < 1.0) {
            return bad("d_eff_tol must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn dispersive(&self) -> DispersiveConfig {
        DispersiveConfig {
            kind: self.disp_kind,
            temperature: self.disp_temperature,
            margin: self.hinge_margin,
        }
    }
}

/// One per-epoch metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub epoch: usize,
    pub step: usize,
    pub mf_loss: f64,
    pub disp_loss: f64,
    pub total_loss: f64,
    pub d_eff: usize,
    pub wall_ms: u64,
}

pub struct Pretrained {
    pub net: VelocityNet,
    pub optimizer: Adam,
    pub rng: Rng,
    pub metrics: Vec<Stage1Row>,
}

/// Rows of the embedding probe: evenly strided over the dataset, at least two.
fn probe_indices(n: usize, size: usize) -> Vec<usize> {
    let p = size.min(n).max(2);
    (0..p).map(|i| (i * n / p).min(n - 1)).collect()
}

/// Minibatch index lists for one epoch: `ceil(N / B)` full batches taken
/// consecutively from the permutation, wrapping around at the end.
fn epoch_batches(perm: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let n = perm.len();
    let count = n.div_ceil(batch);
    (0..count)
        .map(|k| (0..batch).map(|j| perm[(k * batch + j) % n]).collect())
        .collect()
}

fn diverged(step: usize) -> impl Fn(DmpoError) -> DmpoError {
    move |e| match e {
        DmpoError::Autodiff(AdError::NonFinite { op }) => DmpoError::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Minibatch training of a fresh network on `data`.
pub fn pretrain(data: &Dataset, net_config: &NetConfig, config: &Stage1Config) -> Result<Pretrained> {
    let net = VelocityNet::init(config.seed, data.obs_dim(), data.action_dim(), net_config)?;
    pretrain_from(net, data, config)
}

/// Continues training an existing network.
pub fn pretrain_from(net: VelocityNet, data: &Dataset, config: &Stage1Config) -> Result<Pretrained> {
    pretrain_with(net, data, config, |_| {})
}

/// Like [`pretrain_from`], calling `on_epoch` after every epoch.
pub fn pretrain_with(
    mut net: VelocityNet,
    data: &Dataset,
    config: &Stage1Config,
    mut on_epoch: impl FnMut(&Stage1Row),
) -> Result<Pretrained> {
    config.validate()?;
    if data.is_empty() {
        return Err(DmpoError::InvalidArgument("empty dataset".into()));
    }
    ensure_dim("dataset observation", net.obs_dim(), data.obs_dim())?;
    ensure_dim("dataset action", net.action_dim(), data.action_dim())?;
    let (obs_all, act_all) = data.tensors()?;
    let probe = obs_all.select_rows(&probe_indices(data.len(), config.probe_size));
    let disp = config.dispersive();
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    })?;
    let mut rng = rng::stream(config.seed, rng::streams::STAGE1);
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut perm: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        shuffle(&mut perm, &mut rng);
        let (mut mf, mut dl, mut tot, mut count) = (0.0, 0.0, 0.0, 0usize);
        for idx in epoch_batches(&perm, config.batch_size) {
            let n = idx.len();
            let noise = rng::normal_tensor(&mut rng, n, data.action_dim());
            let times = (0..n).map(|_| sample_time_pair(&mut rng, config.rho_inst)).collect();
            let batch = Stage1Batch::new(obs_all.select_rows(&idx), act_all.select_rows(&idx), noise, times)?;
            let (losses, grads) =
                stage1_gradients(&net, &batch, config.alpha_disp, &disp).map_err(diverged(step))?;
            if !losses.total.is_finite() {
                return Err(DmpoError::Diverged {
                    step,
                    detail: format!("loss {}", losses.total),
                });
            }
            adam.step(net.params_mut(), &grads);
            step += 1;
            mf += losses.mf;
            dl += losses.disp;
            tot += losses.total;
            count += 1;
        }
        let h = net.encode(&probe).map_err(diverged(step))?;
        let row = Stage1Row {
            epoch,
            step,
            mf_loss: mf / count as f64,
            disp_loss: dl / count as f64,
            total_loss: tot / count as f64,
            d_eff: dispersive::effective_rank(&h, config.d_eff_tol)?,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::debug!(
            "epoch {} step {} mf {:.5} disp {:.5} d_eff {}",
            row.epoch,
            row.step,
            row.mf_loss,
            row.disp_loss,
            row.d_eff
        );
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(Pretrained {
        net,
        optimizer: adam,
        rng,
        metrics,
    })
}

/// Fisher-Yates with the crate's rng, so the order depends on the seed only.
pub(crate) fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints() {
        let a = Tensor::row(&[1.0, 0.0]);
        let e = Tensor::row(&[0.0, 1.0]);
        assert_eq!(interpolate(&a, &e, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &e, 1.0).unwrap(), e);
        assert_eq!(interpolate(&a, &e, 0.5).unwrap().data(), &[0.5, 0.5]);
        assert!(interpolate(&a, &e, 1.5).is_err());
    }

    #[test]
    fn zero_normals_give_midpoint() {
        assert_eq!(TimePair::from_normals(0.0, 0.0), TimePair { r: 0.5, tau: 0.5 });
    }

    #[test]
    fn collapsed_fraction_matches_rho() {
        let mut rng = rng::seeded(11);
        let n = 100_000;
        let mut equal = 0;
        for _ in 0..n {
            let p = sample_time_pair(&mut rng, 0.1);
            assert!(0.0 < p.r && p.r <= p.tau && p.tau < 1.0);
            if p.r == p.tau {
                equal += 1;
            }
        }
        let frac = equal as f64 / n as f64;
        assert!((0.08..=0.12).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn batches_cover_every_index() {
        let perm: Vec<usize> = (0..10).collect();
        let b = epoch_batches(&perm, 4);
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 4));
        assert_eq!(b[2], vec![8, 9, 0, 1]);
        assert_eq!(epoch_batches(&[0], 3), vec![vec![0, 0, 0]]);
    }

    #[test]
    fn probe_has_two_rows_minimum() {
        assert_eq!(probe_indices(1, 256), vec![0, 0]);
        assert_eq!(probe_indices(4, 2), vec![0, 2]);
    }
}
