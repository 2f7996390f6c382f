//! Versioned JSON checkpoints with base64 binary64 payloads.
//!
//! On disk a checkpoint is `{"format_version", "checksum", "body"}`. The
//! checksum is the SHA-256 of the compact serialization of `body`, checked
//! before anything inside it is decoded.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use dmpo_autodiff::{ParamKey, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvKind;
use crate::error::{DmpoError, Result};
use crate::nn::{NetConfig, ValueNet, VelocityField, VelocityNet};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngState;

pub const FORMAT_VERSION: u32 = 1;

const LOG_SIGMA: &str = "log_sigma";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Pretrained,
    Finetuned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Task the networks were trained on, when known.
    pub env: Option<EnvKind>,
    pub policy: VelocityNet,
    pub value: Option<ValueNet>,
    pub log_sigma: Option<Tensor>,
    pub learnable_sigma: bool,
    /// Optimizer states by role, e.g. `"stage1"` or `"policy"`.
    pub optimizers: BTreeMap<String, Adam>,
    pub rng: Option<RngState>,
    /// Resolved configuration of the run that produced the checkpoint.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    checksum: String,
    body: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    kind: CheckpointKind,
    env: Option<EnvKind>,
    obs_dim: usize,
    action_dim: usize,
    net_config: NetConfig,
    tensors: Vec<EncodedTensor>,
    learnable_sigma: bool,
    optimizers: Vec<EncodedAdam>,
    rng: Option<RngState>,
    config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedTensor {
    name: String,
    shape: [usize; 2],
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedAdam {
    name: String,
    config: AdamConfig,
    step: u64,
    moments: Vec<EncodedMoment>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedMoment {
    group: u16,
    index: u16,
    shape: [usize; 2],
    m: String,
    v: String,
}

fn encode_f64(data: &[f64]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_tensor(what: &str, shape: [usize; 2], text: &str) -> Result<Tensor> {
    let bytes = B64
        .decode(text)
        .map_err(|e| DmpoError::Checkpoint(format!("{what}: bad base64: {e}")))?;
    if bytes.len() != 8 * shape[0] * shape[1] {
        return Err(DmpoError::Checkpoint(format!(
            "{what}: {} bytes for shape {shape:?}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::new(shape[0], shape[1], data)?)
}

fn encode_tensor(name: &str, t: &Tensor) -> EncodedTensor {
    EncodedTensor {
        name: name.to_string(),
        shape: t.shape(),
        data: encode_f64(t.data()),
    }
}

fn encode_adam(name: &str, adam: &Adam) -> EncodedAdam {
    EncodedAdam {
        name: name.to_string(),
        config: adam.config,
        step: adam.step,
        moments: adam
            .moments
            .iter()
            .map(|(k, (m, v))| EncodedMoment {
                group: k.group,
                index: k.index,
                shape: m.shape(),
                m: encode_f64(m.data()),
                v: encode_f64(v.data()),
            })
            .collect(),
    }
}

fn decode_adam(e: &EncodedAdam) -> Result<Adam> {
    let mut adam = Adam::new(e.config)?;
    adam.step = e.step;
    for m in &e.moments {
        let what = format!("optimizer {} moment ({}, {})", e.name, m.group, m.index);
        let pair = (decode_tensor(&what, m.shape, &m.m)?, decode_tensor(&what, m.shape, &m.v)?);
        adam.moments.insert(ParamKey::new(m.group, m.index), pair);
    }
    Ok(adam)
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Copies every named tensor of `slots` out of `pool`, checking shapes.
fn fill(slots: Vec<(String, &mut Tensor)>, pool: &mut BTreeMap<String, Tensor>) -> Result<()> {
    for (name, slot) in slots {
        let t = pool
            .remove(&name)
            .ok_or_else(|| DmpoError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(DmpoError::Checkpoint(format!(
                "tensor {name}: shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

impl Checkpoint {
    pub fn pretrained(policy: VelocityNet, env: Option<EnvKind>, config: serde_json::Value) -> Self {
        Checkpoint {
            kind: CheckpointKind::Pretrained,
            env,
            policy,
            value: None,
            log_sigma: None,
            learnable_sigma: false,
            optimizers: BTreeMap::new(),
            rng: None,
            config,
        }
    }

    /// SHA-256 over all network parameters (policy, critic, exploration).
    pub fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.policy.checksum());
        if let Some(v) = &self.value {
            h.update(v.checksum());
        }
        if let Some(ls) = &self.log_sigma {
            h.update(encode_f64(ls.data()));
        }
        hex::encode(h.finalize())
    }

    fn body(&self) -> Body {
        let mut tensors: Vec<EncodedTensor> = self
            .policy
            .named_tensors()
            .into_iter()
            .map(|(n, t)| encode_tensor(&n, t))
            .collect();
        if let Some(v) = &self.value {
            tensors.extend(v.named_tensors().into_iter().map(|(n, t)| encode_tensor(&n, t)));
        }
        if let Some(ls) = &self.log_sigma {
            tensors.push(encode_tensor(LOG_SIGMA, ls));
        }
        Body {
            kind: self.kind,
            env: self.env,
            obs_dim: self.policy.obs_dim(),
            action_dim: self.policy.action_dim(),
            net_config: self.policy.config().clone(),
            tensors,
            learnable_sigma: self.learnable_sigma,
            optimizers: self.optimizers.iter().map(|(n, a)| encode_adam(n, a)).collect(),
            rng: self.rng.clone(),
            config: self.config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let body = serde_json::to_value(self.body())?;
        let checksum = sha256_hex(&serde_json::to_string(&body)?);
        let env = Envelope {
            format_version: FORMAT_VERSION,
            checksum,
            body,
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)
            .map_err(|e| DmpoError::Checkpoint(format!("truncated or malformed checkpoint: {e}")))?;
        if env.format_version != FORMAT_VERSION {
            return Err(DmpoError::Version {
                found: env.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let computed = sha256_hex(&serde_json::to_string(&env.body)?);
        if computed != env.checksum {
            return Err(DmpoError::Checksum {
                stored: env.checksum,
                computed,
            });
        }
        let body: Body = serde_json::from_value(env.body)
            .map_err(|e| DmpoError::Checkpoint(format!("bad checkpoint body: {e}")))?;

        let mut pool = BTreeMap::new();
        for t in &body.tensors {
            let decoded = decode_tensor(&t.name, t.shape, &t.data)?;
            if pool.insert(t.name.clone(), decoded).is_some() {
                return Err(DmpoError::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
        }
        let mut policy = VelocityNet::zeros(body.obs_dim, body.action_dim, &body.net_config)?;
        fill(policy.named_tensors_mut(), &mut pool)?;
        let value = if pool.keys().any(|k| k.starts_with("value.")) {
            let mut v = ValueNet::zeros(body.obs_dim, &body.net_config)?;
            fill(v.named_tensors_mut(), &mut pool)?;
            Some(v)
        } else {
            None
        };
        let log_sigma = pool.remove(LOG_SIGMA);
        if let Some(ls) = &log_sigma {
            if ls.shape() != [1, body.action_dim] {
                return Err(DmpoError::Checkpoint(format!("log_sigma has shape {:?}", ls.shape())));
            }
        }
        if let Some(extra) = pool.keys().next() {
            return Err(DmpoError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let mut optimizers = BTreeMap::new();
        for e in &body.optimizers {
            optimizers.insert(e.name.clone(), decode_adam(e)?);
        }
        Ok(Checkpoint {
            kind: body.kind,
            env: body.env,
            policy,
            value,
            log_sigma,
            learnable_sigma: body.learnable_sigma,
            optimizers,
            rng: body.rng,
            config: body.config,
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = NetConfig {
            embed_dim: 3,
            encoder_hidden: vec![4],
            trunk_hidden: vec![5],
            value_hidden: vec![4],
            time_freqs: 2,
            damped_time_features: true,
        };
        let mut ck = Checkpoint::pretrained(
            VelocityNet::init(3, 2, 2, &cfg).unwrap(),
            Some(EnvKind::PointReach),
            serde_json::json!({"lr": 0.001}),
        );
        ck.value = Some(ValueNet::init(4, 2, &cfg).unwrap());
        ck.log_sigma = Some(Tensor::row(&[0.01f64.ln(), -1.0 / 3.0]));
        ck
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ck = sample();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.parameter_checksum(), ck.parameter_checksum());
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = sample().to_json().unwrap().replacen("\"format_version\": 1", "\"format_version\": 7", 1);
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(DmpoError::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let text = sample().to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text[..text.len() / 2]),
            Err(DmpoError::Checkpoint(_))
        ));
    }
}
