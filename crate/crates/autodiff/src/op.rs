//! The closed set of differentiable operations.
//!
//! Each [`Op`] carries three rules: the primal kernel, the tangent rule used by
//! the dual-number backend, and the vector-Jacobian rule used by the tape.
//! Binary element-wise ops broadcast their right operand from `1xn`, `mx1` or
//! `1x1`; nothing broadcasts beyond rank 2.

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// Rows with a smaller norm than this are treated as zero by [`Op::NormalizeRows`].
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    /// Square root whose derivative at exactly zero is taken as zero.
    Sqrt,
    Square,
    /// Sum of all entries, `1x1`.
    Sum,
    /// Mean of all entries, `1x1`.
    Mean,
    /// Per-row sum, `mx1`.
    SumRows,
    ConcatCols,
    SliceCols { start: usize, end: usize },
    /// Identity on the primal; blocks tangents and cotangents.
    StopGradient,
    /// `D[i][j] = |x_i - x_j|^2` over rows, exact zeros on the diagonal.
    PairwiseSqDist,
    /// Row-wise unit normalization; rows with norm below [`ZERO_NORM`] map to zero.
    NormalizeRows,
    /// Row-wise log-sum-exp with max subtraction, `mx1`.
    LogSumExpRows { exclude_diagonal: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let [m, n] = a.shape();
    match b.shape() {
        s if s == [m, n] => Ok(Bcast::Same),
        [1, 1] => Ok(Bcast::Scalar),
        [1, c] if c == n => Ok(Bcast::Row),
        [r, 1] if r == m => Ok(Bcast::Col),
        _ => Err(AdError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        }),
    }
}

/// Expands `b` to the shape of `a` according to the broadcast kind.
fn expand(b: &Tensor, kind: Bcast, shape: [usize; 2]) -> Tensor {
    let [m, n] = shape;
    match kind {
        Bcast::Same => b.clone(),
        Bcast::Scalar => Tensor::raw(m, n, vec![b.data()[0]; m * n]),
        Bcast::Row => {
            let mut d = Vec::with_capacity(m * n);
            for _ in 0..m {
                d.extend_from_slice(b.data());
            }
            Tensor::raw(m, n, d)
        }
        Bcast::Col => {
            let mut d = Vec::with_capacity(m * n);
            for i in 0..m {
                d.extend(std::iter::repeat_n(b.data()[i], n));
            }
            Tensor::raw(m, n, d)
        }
    }
}

/// Sums a full-shape cotangent back down to the broadcast operand's shape.
fn reduce(g: &Tensor, kind: Bcast) -> Tensor {
    let [m, n] = g.shape();
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::raw(1, 1, vec![g.sum()]),
        Bcast::Row => {
            let mut d = vec![0.0; n];
            for i in 0..m {
                for (acc, x) in d.iter_mut().zip(g.row_slice(i)) {
                    *acc += x;
                }
            }
            Tensor::raw(1, n, d)
        }
        Bcast::Col => Tensor::raw(m, 1, (0..m).map(|i| g.row_slice(i).iter().sum()).collect()),
    }
}

fn arity(op: &'static str, inputs: usize, expected: usize) -> Result<()> {
    if inputs == expected {
        Ok(())
    } else {
        Err(AdError::Arity {
            op,
            expected,
            got: inputs,
        })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let m = parts.first().map_or(0, |t| t.rows());
    for p in parts {
        if p.rows() != m {
            return Err(AdError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
    }
    let n: usize = parts.iter().map(|p| p.cols()).sum();
    let mut d = Vec::with_capacity(m * n);
    for i in 0..m {
        for p in parts {
            d.extend_from_slice(p.row_slice(i));
        }
    }
    Ok(Tensor::raw(m, n, d))
}

fn slice_cols(x: &Tensor, start: usize, end: usize) -> Tensor {
    let m = x.rows();
    let mut d = Vec::with_capacity(m * (end - start));
    for i in 0..m {
        d.extend_from_slice(&x.row_slice(i)[start..end]);
    }
    Tensor::raw(m, end - start, d)
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Row-wise softmax weights over the entries included in the log-sum-exp.
fn lse_weights(x: &Tensor, out: &Tensor, exclude_diagonal: bool) -> Tensor {
    let [m, n] = x.shape();
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        let y = out.data()[i];
        for j in 0..n {
            if exclude_diagonal && i == j {
                continue;
            }
            w[i * n + j] = (x.get(i, j) - y).exp();
        }
    }
    Tensor::raw(m, n, w)
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::StopGradient => "stop_gradient",
            Op::PairwiseSqDist => "pairwise_sqdist",
            Op::NormalizeRows => "normalize_rows",
            Op::LogSumExpRows { .. } => "logsumexp_rows",
        }
    }

    fn expected_arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => Some(2),
            Op::ConcatCols => None,
            _ => Some(1),
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        match self.expected_arity() {
            Some(e) => arity(self.name(), n, e),
            None if n == 0 => Err(AdError::Arity {
                op: self.name(),
                expected: 1,
                got: 0,
            }),
            None => Ok(()),
        }
    }

    /// Evaluates the op on primal values.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(inputs.len())?;
        let name = self.name();
        let x = inputs[0];
        let out = match self {
            Op::Add | Op::Sub | Op::Mul => {
                let kind = bcast(name, x, inputs[1])?;
                let b = expand(inputs[1], kind, x.shape());
                match self {
                    Op::Add => x.add(&b),
                    Op::Sub => x.sub(&b),
                    _ => x.zip_map(&b, |p, q| p * q),
                }
            }
            Op::Scale(c) => x.scale(*c),
            Op::MatMul => x.matmul(inputs[1])?,
            Op::Transpose => x.transpose(),
            Op::Tanh => x.map(f64::tanh),
            Op::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Softplus => x.map(softplus),
            Op::Exp => x.map(f64::exp),
            Op::Log => x.map(f64::ln),
            Op::Sin => x.map(f64::sin),
            Op::Cos => x.map(f64::cos),
            Op::Sqrt => x.map(f64::sqrt),
            Op::Square => x.map(|v| v * v),
            Op::Sum => Tensor::scalar(x.sum()),
            Op::Mean => {
                if x.is_empty() {
                    return Err(AdError::Invalid("mean of an empty tensor".into()));
                }
                Tensor::scalar(x.sum() / x.len() as f64)
            }
            Op::SumRows => Tensor::raw(
                x.rows(),
                1,
                (0..x.rows()).map(|i| x.row_slice(i).iter().sum()).collect(),
            ),
            Op::ConcatCols => concat_cols(inputs)?,
            Op::SliceCols { start, end } => {
                if start > end || *end > x.cols() {
                    return Err(AdError::Invalid(format!(
                        "slice_cols {start}..{end} out of range for {:?}",
                        x.shape()
                    )));
                }
                slice_cols(x, *start, *end)
            }
            Op::StopGradient => x.clone(),
            Op::PairwiseSqDist => {
                let [m, n] = x.shape();
                let mut d = vec![0.0; m * m];
                for i in 0..m {
                    for j in (i + 1)..m {
                        let mut s = 0.0;
                        for k in 0..n {
                            let diff = x.get(i, k) - x.get(j, k);
                            s += diff * diff;
                        }
                        d[i * m + j] = s;
                        d[j * m + i] = s;
                    }
                }
                Tensor::raw(m, m, d)
            }
            Op::NormalizeRows => {
                let norms = row_norms(x);
                let [m, n] = x.shape();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    if norms[i] >= ZERO_NORM {
                        for k in 0..n {
                            d[i * n + k] = x.get(i, k) / norms[i];
                        }
                    }
                }
                Tensor::raw(m, n, d)
            }
            Op::LogSumExpRows { exclude_diagonal } => {
                let [m, n] = x.shape();
                let mut d = Vec::with_capacity(m);
                for i in 0..m {
                    let included = |j: usize| !(*exclude_diagonal && i == j);
                    let max = (0..n)
                        .filter(|&j| included(j))
                        .map(|j| x.get(i, j))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        return Err(AdError::Invalid(format!(
                            "logsumexp_rows: row {i} has no entries"
                        )));
                    }
                    let s: f64 = (0..n)
                        .filter(|&j| included(j))
                        .map(|j| (x.get(i, j) - max).exp())
                        .sum();
                    d.push(max + s.ln());
                }
                Tensor::raw(m, 1, d)
            }
        };
        out.check_finite(name)?;
        Ok(out)
    }

    /// Directional derivative of the op at `inputs` along `tangents`.
    pub fn tangent(&self, inputs: &[&Tensor], tangents: &[&Tensor], out: &Tensor) -> Result<Tensor> {
        self.check_arity(inputs.len())?;
        arity(self.name(), tangents.len(), inputs.len())?;
        let name = self.name();
        let x = inputs[0];
        let t = tangents[0];
        let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            Tensor::raw(
                x.rows(),
                x.cols(),
                x.data()
                    .iter()
                    .zip(t.data())
                    .map(|(&xv, &tv)| f(xv, tv))
                    .collect(),
            )
        };
        let res = match self {
            Op::Add | Op::Sub => {
                let kind = bcast(name, x, inputs[1])?;
                let tb = expand(tangents[1], kind, x.shape());
                if *self == Op::Add {
                    t.add(&tb)
                } else {
                    t.sub(&tb)
                }
            }
            Op::Mul => {
                let kind = bcast(name, x, inputs[1])?;
                let b = expand(inputs[1], kind, x.shape());
                let tb = expand(tangents[1], kind, x.shape());
                let lhs = t.zip_map(&b, |p, q| p * q);
                let rhs = x.zip_map(&tb, |p, q| p * q);
                lhs.add(&rhs)
            }
            Op::Scale(c) => t.scale(*c),
            Op::MatMul => t.matmul(inputs[1])?.add(&x.matmul(tangents[1])?),
            Op::Transpose => t.transpose(),
            Op::Tanh => out.zip_map(t, |y, tv| (1.0 - y * y) * tv),
            Op::Relu => elementwise(&|xv, tv| if xv > 0.0 { tv } else { 0.0 }),
            Op::Softplus => elementwise(&|xv, tv| sigmoid(xv) * tv),
            Op::Exp => out.zip_map(t, |y, tv| y * tv),
            Op::Log => elementwise(&|xv, tv| tv / xv),
            Op::Sin => elementwise(&|xv, tv| xv.cos() * tv),
            Op::Cos => elementwise(&|xv, tv| -xv.sin() * tv),
            Op::Sqrt => out.zip_map(t, |y, tv| if y == 0.0 { 0.0 } else { tv / (2.0 * y) }),
            Op::Square => elementwise(&|xv, tv| 2.0 * xv * tv),
            Op::Sum => Tensor::scalar(t.sum()),
            Op::Mean => Tensor::scalar(t.sum() / t.len() as f64),
            Op::SumRows => Op::SumRows.forward(&[t])?,
            Op::ConcatCols => concat_cols(tangents)?,
            Op::SliceCols { start, end } => slice_cols(t, *start, *end),
            Op::StopGradient => Tensor::zeros(x.rows(), x.cols()),
            Op::PairwiseSqDist => {
                let [m, n] = x.shape();
                let mut d = vec![0.0; m * m];
                for i in 0..m {
                    for j in (i + 1)..m {
                        let mut s = 0.0;
                        for k in 0..n {
                            s += 2.0 * (x.get(i, k) - x.get(j, k)) * (t.get(i, k) - t.get(j, k));
                        }
                        d[i * m + j] = s;
                        d[j * m + i] = s;
                    }
                }
                Tensor::raw(m, m, d)
            }
            Op::NormalizeRows => {
                let norms = row_norms(x);
                let [m, n] = x.shape();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    if norms[i] < ZERO_NORM {
                        continue;
                    }
                    let u = out.row_slice(i);
                    let tr = t.row_slice(i);
                    let proj: f64 = u.iter().zip(tr).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        d[i * n + k] = (tr[k] - u[k] * proj) / norms[i];
                    }
                }
                Tensor::raw(m, n, d)
            }
            Op::LogSumExpRows { exclude_diagonal } => {
                let w = lse_weights(x, out, *exclude_diagonal);
                Op::SumRows.forward(&[&w.zip_map(t, |p, q| p * q)])?
            }
        };
        res.check_finite(name)?;
        Ok(res)
    }

    /// Cotangents for each input given the output cotangent `g`. `None` means
    /// the input receives no gradient through this op.
    pub fn vjp(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        self.check_arity(inputs.len())?;
        let name = self.name();
        let x = inputs[0];
        let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            Tensor::raw(
                x.rows(),
                x.cols(),
                x.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| f(xv, gv))
                    .collect(),
            )
        };
        let res = match self {
            Op::Add | Op::Sub => {
                let kind = bcast(name, x, inputs[1])?;
                let gb = reduce(g, kind);
                let gb = if *self == Op::Sub { gb.scale(-1.0) } else { gb };
                vec![Some(g.clone()), Some(gb)]
            }
            Op::Mul => {
                let kind = bcast(name, x, inputs[1])?;
                let b = expand(inputs[1], kind, x.shape());
                let ga = g.zip_map(&b, |p, q| p * q);
                let gb = reduce(&g.zip_map(x, |p, q| p * q), kind);
                vec![Some(ga), Some(gb)]
            }
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::MatMul => {
                let b = inputs[1];
                vec![
                    Some(g.matmul(&b.transpose())?),
                    Some(x.transpose().matmul(g)?),
                ]
            }
            Op::Transpose => vec![Some(g.transpose())],
            Op::Tanh => vec![Some(out.zip_map(g, |y, gv| (1.0 - y * y) * gv))],
            Op::Relu => vec![Some(elementwise(&|xv, gv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Softplus => vec![Some(elementwise(&|xv, gv| sigmoid(xv) * gv))],
            Op::Exp => vec![Some(out.zip_map(g, |y, gv| y * gv))],
            Op::Log => vec![Some(elementwise(&|xv, gv| gv / xv))],
            Op::Sin => vec![Some(elementwise(&|xv, gv| xv.cos() * gv))],
            Op::Cos => vec![Some(elementwise(&|xv, gv| -xv.sin() * gv))],
            Op::Sqrt => vec![Some(
                out.zip_map(g, |y, gv| if y == 0.0 { 0.0 } else { gv / (2.0 * y) }),
            )],
            Op::Square => vec![Some(elementwise(&|xv, gv| 2.0 * xv * gv))],
            Op::Sum => vec![Some(Tensor::full(x.rows(), x.cols(), g.item()))],
            Op::Mean => vec![Some(Tensor::full(
                x.rows(),
                x.cols(),
                g.item() / x.len() as f64,
            ))],
            Op::SumRows => vec![Some(expand(g, Bcast::Col, x.shape()))],
            Op::ConcatCols => {
                let mut start = 0;
                inputs
                    .iter()
                    .map(|p| {
                        let end = start + p.cols();
                        let piece = slice_cols(g, start, end);
                        start = end;
                        Some(piece)
                    })
                    .collect()
            }
            Op::SliceCols { start, end } => {
                let [m, n] = x.shape();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + end].copy_from_slice(g.row_slice(i));
                }
                vec![Some(Tensor::raw(m, n, d))]
            }
            Op::StopGradient => vec![None],
            Op::PairwiseSqDist => {
                let [m, n] = x.shape();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g.get(i, j) + g.get(j, i));
                        for k in 0..n {
                            d[i * n + k] += w * (x.get(i, k) - x.get(j, k));
                        }
                    }
                }
                vec![Some(Tensor::raw(m, n, d))]
            }
            Op::NormalizeRows => {
                let norms = row_norms(x);
                let [m, n] = x.shape();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    if norms[i] < ZERO_NORM {
                        continue;
                    }
                    let u = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let proj: f64 = u.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        d[i * n + k] = (gr[k] - u[k] * proj) / norms[i];
                    }
                }
                vec![Some(Tensor::raw(m, n, d))]
            }
            Op::LogSumExpRows { exclude_diagonal } => {
                let w = lse_weights(x, out, *exclude_diagonal);
                vec![Some(w.zip_map(&expand(g, Bcast::Col, x.shape()), |p, q| p * q))]
            }
        };
        for t in res.iter().flatten() {
            t.check_finite(name)?;
        }
        Ok(res)
    }
}
