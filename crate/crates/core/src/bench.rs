//! Single-observation inference latency per number of sampling steps.

use std::time::Instant;

use dmpo_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DmpoError, Result};
use crate::nn::VelocityField;
use crate::rng;
use crate::sampler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    /// Velocity evaluations per generated action.
    pub nfe: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
    /// Timed calls after warm-up.
    pub runs: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `warmup + runs` deterministic sampling calls per `K` on one
/// observation and reports the median of the last `runs`. The `K` values
/// are visited round-robin, so slow drift of the machine hits all of them.
pub fn bench_latency<F: VelocityField>(
    field: &F,
    obs: &[f64],
    ks: &[usize],
    runs: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(DmpoError::InvalidArgument("K values must be >= 1".into()));
    }
    if runs == 0 {
        return Err(DmpoError::InvalidArgument("need at least one timed run".into()));
    }
    let obs = Tensor::row(obs);
    let mut rng = rng::stream(seed, rng::streams::EVAL);
    let mut times = vec![Vec::with_capacity(runs); ks.len()];
    let mut nfe = vec![0; ks.len()];
    for rep in 0..warmup + runs {
        for (i, &k) in ks.iter().enumerate() {
            let t0 = Instant::now();
            let s = sampler::sample_deterministic(field, &obs, k, &mut rng)?;
            let dt = t0.elapsed().as_secs_f64() * 1e6;
            std::hint::black_box(&s.actions);
            nfe[i] = s.nfe;
            if rep >= warmup {
                times[i].push(dt);
            }
        }
    }
    Ok(ks
        .iter()
        .zip(times)
        .zip(nfe)
        .map(|((&k, mut t), nfe)| {
            t.sort_by(f64::total_cmp);
            BenchRow {
                k,
                nfe,
                median_us: quantile(&t, 0.5),
                p10_us: quantile(&t, 0.1),
                p90_us: quantile(&t, 0.9),
                runs,
            }
        })
        .collect())
}
