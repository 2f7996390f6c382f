//! Batch-level repulsive losses on embeddings and the effective-rank
//! diagnostic.
//!
//! All losses take `H: B x d_h` and need `B >= 2`. They are written against
//! [`Backend`] so the same code yields values, tangents and gradients.

use std::fmt;
use std::str::FromStr;

use dmpo_autodiff::{Backend, Eval, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DmpoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispersiveKind {
    NceL2,
    NceCos,
    Hinge,
    Cov,
    None,
}

impl DispersiveKind {
    pub const ALL: [DispersiveKind; 5] = [
        DispersiveKind::NceL2,
        DispersiveKind::NceCos,
        DispersiveKind::Hinge,
        DispersiveKind::Cov,
        DispersiveKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DispersiveKind::NceL2 => "nce-l2",
            DispersiveKind::NceCos => "nce-cos",
            DispersiveKind::Hinge => "hinge",
            DispersiveKind::Cov => "cov",
            DispersiveKind::None => "none",
        }
    }
}

impl fmt::Display for DispersiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DispersiveKind {
    type Err = DmpoError;

    fn from_str(s: &str) -> Result<Self> {
        DispersiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DmpoError::InvalidArgument(format!("unknown dispersive kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DispersiveConfig {
    pub kind: DispersiveKind,
    pub temperature: f64,
    pub margin: f64,
}

impl Default for DispersiveConfig {
    fn default() -> Self {
        DispersiveConfig {
            kind: DispersiveKind::NceL2,
            temperature: 0.1,
            margin: 1.0,
        }
    }
}

fn check_batch(h: &Tensor) -> Result<()> {
    if h.rows() < 2 {
        return Err(DmpoError::InvalidArgument(format!(
            "dispersive losses need at least 2 embeddings, got {}",
            h.rows()
        )));
    }
    Ok(())
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(DmpoError::InvalidArgument(format!("{name} must be positive, got {x}")))
    }
}

fn off_diagonal_mask(n: usize) -> Tensor {
    let mut m = Tensor::full(n, n, 1.0);
    for i in 0..n {
        m.data_mut()[i * n + i] = 0.0;
    }
    m
}

/// `-(1/B) sum_i log[ exp(|h_i|^2/T) / sum_{k!=i} exp(-|h_i-h_k|^2/T) ]`.
///
/// The numerator uses the squared norm of `h_i` itself, so the loss is not
/// translation invariant.
pub fn nce_l2<B: Backend>(b: &mut B, h: &B::Value, temperature: f64) -> Result<B::Value> {
    check_batch(b.value(h))?;
    check_positive("temperature", temperature)?;
    let sq = b.square(h)?;
    let norms = b.sum_rows(&sq)?;
    let num = b.scale(&norms, 1.0 / temperature)?;
    let d = b.pairwise_sqdist(h)?;
    let logits = b.scale(&d, -1.0 / temperature)?;
    let lse = b.logsumexp_rows(&logits, true)?;
    let per_row = b.sub(&num, &lse)?;
    let mean = b.mean(&per_row)?;
    Ok(b.scale(&mean, -1.0)?)
}

/// `-(1/B) sum_i log[ exp(1/T) / sum_{k!=i} exp(cos(h_i,h_k)/T) ]`. Rows with
/// norm below [`dmpo_autodiff::ZERO_NORM`] have similarity 0 to every row.
pub fn nce_cos<B: Backend>(b: &mut B, h: &B::Value, temperature: f64) -> Result<B::Value> {
    check_batch(b.value(h))?;
    check_positive("temperature", temperature)?;
    let n = b.normalize_rows(h)?;
    let nt = b.transpose(&n)?;
    let sim = b.matmul(&n, &nt)?;
    let logits = b.scale(&sim, 1.0 / temperature)?;
    let lse = b.logsumexp_rows(&logits, true)?;
    let mean_lse = b.mean(&lse)?;
    // -(1/B) sum_i (1/T - lse_i) = mean(lse) - 1/T
    let shift = b.constant(Tensor::scalar(-1.0 / temperature));
    Ok(b.add(&mean_lse, &shift)?)
}

/// `1/(B(B-1)) sum_{i != j} max(0, m - |h_i - h_j|)`.
pub fn hinge<B: Backend>(b: &mut B, h: &B::Value, margin: f64) -> Result<B::Value> {
    check_batch(b.value(h))?;
    check_positive("margin", margin)?;
    let rows = b.value(h).rows();
    let d2 = b.pairwise_sqdist(h)?;
    let dist = b.sqrt(&d2)?;
    let neg = b.scale(&dist, -1.0)?;
    let m = b.constant(Tensor::scalar(margin));
    let gap = b.add(&neg, &m)?;
    let active = b.relu(&gap)?;
    let mask = b.constant(off_diagonal_mask(rows));
    let masked = b.mul(&active, &mask)?;
    let total = b.sum(&masked)?;
    Ok(b.scale(&total, 1.0 / (rows * (rows - 1)) as f64)?)
}

/// `(1/d_h) sum_{i != j} C_ij^2` with `C` the unbiased sample covariance of
/// the columns of `H`.
pub fn cov_loss<B: Backend>(b: &mut B, h: &B::Value) -> Result<B::Value> {
    check_batch(b.value(h))?;
    let [rows, cols] = b.value(h).shape();
    let avg = b.constant(Tensor::full(1, rows, 1.0 / rows as f64));
    let mean = b.matmul(&avg, h)?;
    let neg_mean = b.scale(&mean, -1.0)?;
    let centered = b.add(h, &neg_mean)?;
    let ct = b.transpose(&centered)?;
    let gram = b.matmul(&ct, &centered)?;
    let cov = b.scale(&gram, 1.0 / (rows - 1) as f64)?;
    let sq = b.square(&cov)?;
    let mask = b.constant(off_diagonal_mask(cols));
    let off = b.mul(&sq, &mask)?;
    let total = b.sum(&off)?;
    Ok(b.scale(&total, 1.0 / cols as f64)?)
}

/// Dispatches on `config.kind`; `None` yields the constant 0.
pub fn dispersive_loss<B: Backend>(b: &mut B, h: &B::Value, config: &DispersiveConfig) -> Result<B::Value> {
    match config.kind {
        DispersiveKind::NceL2 => nce_l2(b, h, config.temperature),
        DispersiveKind::NceCos => nce_cos(b, h, config.temperature),
        DispersiveKind::Hinge => hinge(b, h, config.margin),
        DispersiveKind::Cov => cov_loss(b, h),
        DispersiveKind::None => Ok(b.constant(Tensor::scalar(0.0))),
    }
}

/// Plain-value version of [`dispersive_loss`].
pub fn dispersive_value(h: &Tensor, config: &DispersiveConfig) -> Result<f64> {
    Ok(dispersive_loss(&mut Eval, h, config)?.item())
}

/// Number of singular values of the column-centered `H` above `tol` times the
/// largest one. A centered matrix that is zero up to rounding has rank 0.
pub fn effective_rank(h: &Tensor, tol: f64) -> Result<usize> {
    check_batch(h)?;
    let [rows, cols] = h.shape();
    let mut centered = h.clone();
    for j in 0..cols {
        let mean = (0..rows).map(|i| h.get(i, j)).sum::<f64>() / rows as f64;
        for i in 0..rows {
            centered.data_mut()[i * cols + j] -= mean;
        }
    }
    let m = DMatrix::from_row_slice(rows, cols, centered.data());
    let sv = m.singular_values();
    let largest = sv.iter().cloned().fold(0.0, f64::max);
    let scale = h.max_abs().max(1.0) * ((rows * cols) as f64).sqrt();
    if largest <= 1e-12 * scale {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * largest).count())
}
