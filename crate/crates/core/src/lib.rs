//! One-step generative policies trained in two stages.
//!
//! Stage 1 fits an average-velocity field to demonstrations, optionally with a
//! dispersive penalty on the observation embeddings. Stage 2 fine-tunes the
//! resulting policy with PPO on a stochastic denoising chain, regularized
//! toward the frozen pre-trained policy.

pub mod bench;
pub mod dataset;
pub mod dispersive;
pub mod envs;
pub mod error;
pub mod io;
pub mod meanflow;
pub mod nn;
pub mod optim;
pub mod ppo;
pub mod rng;
pub mod sampler;

pub use error::{DmpoError, Result};
