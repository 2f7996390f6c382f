//! Velocity and value networks.
//!
//! The velocity network conditions on an observation embedding `h = enc(o)`
//! and on sinusoidal features of both flow times:
//! `u(z, r, tau, o) = trunk([z, h, tf(r), tf(tau)])`.
//! Encoder and trunk own disjoint parameter keys, so the embedding depends on
//! encoder parameters only. Time features are damped per octave by default
//! (octave `j` scaled by `2^-j`), which keeps their span but bounds every
//! feature's time derivative by `pi`.

use dmpo_autodiff::layers::{Activation, Linear, Mlp};
use dmpo_autodiff::{Backend, Eval, ParamKey, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, DmpoError, Result};
use crate::rng::{self, Rng};

pub const VELOCITY_GROUP: u16 = 0;
pub const VALUE_GROUP: u16 = 1;
pub const EXPLORATION_GROUP: u16 = 2;

/// Key offset of the trunk inside the velocity group.
const TRUNK_BASE: u16 = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Embedding width `d_h`.
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    /// Number of octaves `j` in the `sin/cos(2^j pi t)` time features.
    pub time_freqs: usize,
    /// Scales octave `j` by `2^-j`, bounding every feature's time derivative
    /// by `pi`.
    pub damped_time_features: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            embed_dim: 32,
            encoder_hidden: vec![64],
            trunk_hidden: vec![64, 64],
            value_hidden: vec![64, 64],
            time_freqs: 4,
            damped_time_features: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self
            .encoder_hidden
            .iter()
            .chain(&self.trunk_hidden)
            .chain(&self.value_hidden);
        if self.embed_dim == 0 || widths.into_iter().any(|&w| w == 0) {
            return Err(DmpoError::InvalidArgument("layer width must be positive".into()));
        }
        if self.time_freqs == 0 {
            return Err(DmpoError::InvalidArgument("time_freqs must be positive".into()));
        }
        Ok(())
    }

    pub fn time_feature_dim(&self) -> usize {
        2 * self.time_freqs
    }
}

/// Anything that maps `(z, r, tau, o)` to a velocity, under any backend.
///
/// Implemented by [`VelocityNet`]; tests plug in closed-form fields.
pub trait VelocityField {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// `z: B x d_a`, `r, tau: B x 1`, `obs: B x d_obs` to `B x d_a`.
    fn velocity<B: Backend>(
        &self,
        b: &mut B,
        z: &B::Value,
        r: &B::Value,
        tau: &B::Value,
        obs: &B::Value,
    ) -> Result<B::Value>;
}

fn uniform_mlp(
    rng: &mut Rng,
    dims: &[usize],
    hidden: Activation,
    output: Activation,
) -> Result<Mlp> {
    if dims.contains(&0) {
        return Err(DmpoError::InvalidArgument("zero-width layer".into()));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = Tensor::new(fan_in, fan_out, draw(fan_in * fan_out))?;
        let bias = Tensor::new(1, fan_out, draw(fan_out))?;
        layers.push(Linear::new(weight, bias)?);
    }
    Ok(Mlp::new(layers, hidden, output)?)
}

fn zero_mlp(dims: &[usize], hidden: Activation, output: Activation) -> Result<Mlp> {
    let layers = dims.windows(2).map(|p| Linear::zeros(p[0], p[1])).collect();
    Ok(Mlp::new(layers, hidden, output)?)
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

fn named_tensors<'a>(prefix: &str, mlp: &'a Mlp) -> Vec<(String, &'a Tensor)> {
    mlp.layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.weight"), &l.weight),
                (format!("{prefix}.{i}.bias"), &l.bias),
            ]
        })
        .collect()
}

fn named_tensors_mut<'a>(prefix: &str, mlp: &'a mut Mlp) -> Vec<(String, &'a mut Tensor)> {
    mlp.layers
        .iter_mut()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.weight"), &mut l.weight),
                (format!("{prefix}.{i}.bias"), &mut l.bias),
            ]
        })
        .collect()
}

fn sha256_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for x in t.data() {
            hasher.update(x.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    obs_dim: usize,
    action_dim: usize,
    config: NetConfig,
    pub encoder: Mlp,
    pub trunk: Mlp,
}

/// Velocity together with the embedding it was conditioned on.
pub struct VelocityOutput<V> {
    pub velocity: V,
    pub embedding: V,
}

impl VelocityNet {
    pub fn init(seed: u64, obs_dim: usize, action_dim: usize, config: &NetConfig) -> Result<Self> {
        Self::build(obs_dim, action_dim, config, Some(&mut rng::stream(seed, rng::streams::INIT)))
    }

    /// All-zero parameters; the velocity is identically zero.
    pub fn zeros(obs_dim: usize, action_dim: usize, config: &NetConfig) -> Result<Self> {
        Self::build(obs_dim, action_dim, config, None)
    }

    fn build(obs_dim: usize, action_dim: usize, config: &NetConfig, rng: Option<&mut Rng>) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || action_dim == 0 {
            return Err(DmpoError::InvalidArgument("network dims must be positive".into()));
        }
        let enc_dims = layer_dims(obs_dim, &config.encoder_hidden, config.embed_dim);
        let trunk_in = action_dim + config.embed_dim + 2 * config.time_feature_dim();
        let trunk_dims = layer_dims(trunk_in, &config.trunk_hidden, action_dim);
        let (encoder, trunk) = match rng {
            Some(rng) => (
                uniform_mlp(rng, &enc_dims, Activation::Tanh, Activation::Tanh)?,
                uniform_mlp(rng, &trunk_dims, Activation::Tanh, Activation::Identity)?,
            ),
            None => (
                zero_mlp(&enc_dims, Activation::Tanh, Activation::Tanh)?,
                zero_mlp(&trunk_dims, Activation::Tanh, Activation::Identity)?,
            ),
        };
        Ok(VelocityNet {
            obs_dim,
            action_dim,
            config: config.clone(),
            encoder,
            trunk,
        })
    }

    /// Rebuilds a network from explicit layers, checking every dimension.
    pub fn from_parts(
        obs_dim: usize,
        action_dim: usize,
        config: &NetConfig,
        encoder: Mlp,
        trunk: Mlp,
    ) -> Result<Self> {
        let template = Self::zeros(obs_dim, action_dim, config)?;
        let same = |a: &Mlp, b: &Mlp| {
            a.layers.len() == b.layers.len()
                && a.layers
                    .iter()
                    .zip(&b.layers)
                    .all(|(x, y)| x.weight.shape() == y.weight.shape())
        };
        if !same(&template.encoder, &encoder) || !same(&template.trunk, &trunk) {
            return Err(DmpoError::InvalidArgument("layer shapes do not match config".into()));
        }
        Ok(VelocityNet {
            encoder,
            trunk,
            ..template
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = named_tensors("encoder", &self.encoder);
        out.extend(named_tensors("trunk", &self.trunk));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = named_tensors_mut("encoder", &mut self.encoder);
        out.extend(named_tensors_mut("trunk", &mut self.trunk));
        out
    }

    /// Parameter tensors with the keys they use in a graph.
    pub fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let enc = self
            .encoder
            .tensors_mut()
            .enumerate()
            .map(|(i, t)| (ParamKey::new(VELOCITY_GROUP, i as u16), t));
        let trunk = self
            .trunk
            .tensors_mut()
            .enumerate()
            .map(|(i, t)| (ParamKey::new(VELOCITY_GROUP, TRUNK_BASE + i as u16), t));
        enc.chain(trunk).collect()
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.encoder.tensors().chain(self.trunk.tensors())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// SHA-256 over shapes and little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        sha256_tensors(self.tensors())
    }

    pub fn encode_with<B: Backend>(&self, b: &mut B, obs: &B::Value) -> Result<B::Value> {
        ensure_dim("observation", self.obs_dim, b.value(obs).cols())?;
        Ok(self.encoder.forward(b, VELOCITY_GROUP, 0, obs)?)
    }

    /// Embeddings `H` (`B x d_h`) for a batch of observations.
    pub fn encode(&self, obs: &Tensor) -> Result<Tensor> {
        self.encode_with(&mut Eval, obs)
    }

    fn time_features<B: Backend>(&self, b: &mut B, t: &B::Value) -> Result<B::Value> {
        let freqs: Vec<f64> = (0..self.config.time_freqs)
            .map(|j| f64::from(1u32 << j) * std::f64::consts::PI)
            .collect();
        let freqs = b.constant(Tensor::row(&freqs));
        let arg = b.matmul(t, &freqs)?;
        let s = b.sin(&arg)?;
        let c = b.cos(&arg)?;
        let feats = b.concat_cols(&[&s, &c])?;
        if !self.config.damped_time_features {
            return Ok(feats);
        }
        let amp: Vec<f64> = (0..2 * self.config.time_freqs)
            .map(|i| 1.0 / f64::from(1u32 << (i % self.config.time_freqs)))
            .collect();
        let amp = b.constant(Tensor::row(&amp));
        Ok(b.mul(&feats, &amp)?)
    }

    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        z: &B::Value,
        r: &B::Value,
        tau: &B::Value,
        obs: &B::Value,
    ) -> Result<VelocityOutput<B::Value>> {
        let rows = b.value(z).rows();
        ensure_dim("noisy action", self.action_dim, b.value(z).cols())?;
        for (what, v) in [("flow time r", r), ("flow time tau", tau)] {
            ensure_dim(what, 1, b.value(v).cols())?;
            ensure_dim(what, rows, b.value(v).rows())?;
        }
        ensure_dim("observation batch", rows, b.value(obs).rows())?;
        let h = self.encode_with(b, obs)?;
        let tr = self.time_features(b, r)?;
        let tt = self.time_features(b, tau)?;
        let x = b.concat_cols(&[z, &h, &tr, &tt])?;
        let u = self.trunk.forward(b, VELOCITY_GROUP, TRUNK_BASE, &x)?;
        Ok(VelocityOutput {
            velocity: u,
            embedding: h,
        })
    }

    /// Velocity at scalar flow times `0 <= r <= tau <= 1` for a batch.
    pub fn predict_velocity(&self, z: &Tensor, r: f64, tau: f64, obs: &Tensor) -> Result<Tensor> {
        check_times(r, tau)?;
        let n = z.rows();
        let out = self.forward(&mut Eval, z, &Tensor::full(n, 1, r), &Tensor::full(n, 1, tau), obs)?;
        Ok(out.velocity)
    }
}

pub(crate) fn check_times(r: f64, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&tau) || r > tau {
        return Err(DmpoError::InvalidArgument(format!(
            "flow times must satisfy 0 <= r <= tau <= 1, got r={r}, tau={tau}"
        )));
    }
    Ok(())
}

impl VelocityField for VelocityNet {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn velocity<B: Backend>(
        &self,
        b: &mut B,
        z: &B::Value,
        r: &B::Value,
        tau: &B::Value,
        obs: &B::Value,
    ) -> Result<B::Value> {
        Ok(self.forward(b, z, r, tau, obs)?.velocity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub mlp: Mlp,
}

impl ValueNet {
    pub fn init(seed: u64, obs_dim: usize, config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let dims = layer_dims(obs_dim, &config.value_hidden, 1);
        let mut rng = rng::stream(seed, rng::streams::VALUE_INIT);
        Ok(ValueNet {
            mlp: uniform_mlp(&mut rng, &dims, Activation::Tanh, Activation::Identity)?,
        })
    }

    pub fn zeros(obs_dim: usize, config: &NetConfig) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 {
            return Err(DmpoError::InvalidArgument("network dims must be positive".into()));
        }
        let dims = layer_dims(obs_dim, &config.value_hidden, 1);
        Ok(ValueNet {
            mlp: zero_mlp(&dims, Activation::Tanh, Activation::Identity)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        ensure_dim("value output", 1, mlp.output_dim())?;
        Ok(ValueNet { mlp })
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        named_tensors("value", &self.mlp)
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        named_tensors_mut("value", &mut self.mlp)
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        self.mlp
            .tensors_mut()
            .enumerate()
            .map(|(i, t)| (ParamKey::new(VALUE_GROUP, i as u16), t))
            .collect()
    }

    pub fn checksum(&self) -> String {
        sha256_tensors(self.mlp.tensors())
    }

    /// `B x 1` value estimates.
    pub fn forward<B: Backend>(&self, b: &mut B, obs: &B::Value) -> Result<B::Value> {
        ensure_dim("observation", self.obs_dim(), b.value(obs).cols())?;
        Ok(self.mlp.forward(b, VALUE_GROUP, 0, obs)?)
    }

    pub fn predict(&self, obs: &Tensor) -> Result<Tensor> {
        self.forward(&mut Eval, obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            embed_dim: 3,
            encoder_hidden: vec![4],
            trunk_hidden: vec![5],
            value_hidden: vec![4],
            time_freqs: 2,
            damped_time_features: true,
        }
    }

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let net = VelocityNet::zeros(2, 2, &small()).unwrap();
        let h = net.encode(&Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5]])).unwrap();
        assert!(h.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_net_predicts_zero_velocity() {
        let net = VelocityNet::zeros(2, 2, &small()).unwrap();
        let u = net
            .predict_velocity(&Tensor::row(&[0.4, 0.1]), 0.2, 0.7, &Tensor::row(&[1.0, 1.0]))
            .unwrap();
        assert_eq!(u.data(), &[0.0, 0.0]);
    }

    #[test]
    fn r_greater_than_tau_rejected() {
        let net = VelocityNet::zeros(2, 2, &small()).unwrap();
        let err = net.predict_velocity(&Tensor::row(&[0.0, 0.0]), 0.8, 0.3, &Tensor::row(&[0.0, 0.0]));
        assert!(matches!(err, Err(DmpoError::InvalidArgument(_))));
    }

    #[test]
    fn dims_checked() {
        let net = VelocityNet::zeros(2, 2, &small()).unwrap();
        assert!(matches!(
            net.encode(&Tensor::row(&[1.0, 2.0, 3.0])),
            Err(DmpoError::DimMismatch { .. })
        ));
        assert!(matches!(
            net.predict_velocity(&Tensor::row(&[0.0]), 0.0, 1.0, &Tensor::row(&[0.0, 0.0])),
            Err(DmpoError::DimMismatch { .. })
        ));
    }

    #[test]
    fn seeded_init_checksums() {
        let a = VelocityNet::init(1, 2, 2, &small()).unwrap();
        let b = VelocityNet::init(1, 2, 2, &small()).unwrap();
        let c = VelocityNet::init(2, 2, 2, &small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        let v1 = ValueNet::init(1, 2, &small()).unwrap();
        let v2 = ValueNet::init(3, 2, &small()).unwrap();
        assert_ne!(v1.checksum(), v2.checksum());
    }

    #[test]
    fn zero_width_rejected() {
        let mut cfg = small();
        cfg.trunk_hidden = vec![0];
        assert!(VelocityNet::init(0, 2, 2, &cfg).is_err());
        assert!(VelocityNet::init(0, 0, 2, &small()).is_err());
    }

    #[test]
    fn init_within_fan_in_bounds() {
        let net = VelocityNet::init(5, 4, 2, &NetConfig::default()).unwrap();
        for layer in net.encoder.layers.iter().chain(&net.trunk.layers) {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            assert!(layer.weight.max_abs() <= bound);
            assert!(layer.bias.max_abs() <= bound);
        }
    }

    #[test]
    fn param_keys_are_unique() {
        let mut net = VelocityNet::init(0, 2, 2, &NetConfig::default()).unwrap();
        let mut keys: Vec<_> = net.params_mut().into_iter().map(|(k, _)| k).collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), n);
        assert_eq!(n, net.named_tensors().len());
    }
}
