use crate::error::Result;
use crate::op::Op;
use crate::tensor::Tensor;

/// Identifies a trainable tensor across graph builds. `group` separates
/// networks that share one graph, `index` enumerates tensors within a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: u16,
    pub index: u16,
}

impl ParamKey {
    pub const fn new(group: u16, index: u16) -> Self {
        ParamKey { group, index }
    }
}

/// An evaluation strategy for programs written against [`Op`].
///
/// Model code is written once, generic over `Backend`, and evaluated as plain
/// values ([`Eval`]), dual numbers ([`crate::Dual`]) or a recorded tape
/// ([`crate::Graph`]). All three share the primal kernels in [`Op::forward`],
/// so primal results are bit-identical across backends.
pub trait Backend {
    type Value: Clone;

    /// A leaf that carries no derivative information of its own.
    fn constant(&mut self, t: Tensor) -> Self::Value;

    /// A trainable leaf. Only the tape distinguishes it from a constant.
    fn parameter(&mut self, key: ParamKey, t: &Tensor) -> Self::Value;

    fn apply(&mut self, op: Op, inputs: &[&Self::Value]) -> Result<Self::Value>;

    /// Primal value carried by `v`.
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mul, &[a, b])
    }
    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value> {
        self.apply(Op::Scale(c), &[a])
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Transpose, &[a])
    }
    fn tanh(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Tanh, &[a])
    }
    fn relu(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Relu, &[a])
    }
    fn softplus(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Softplus, &[a])
    }
    fn exp(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Exp, &[a])
    }
    fn log(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Log, &[a])
    }
    fn sin(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sin, &[a])
    }
    fn cos(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Cos, &[a])
    }
    fn sqrt(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sqrt, &[a])
    }
    fn square(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Square, &[a])
    }
    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sum, &[a])
    }
    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mean, &[a])
    }
    fn sum_rows(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::SumRows, &[a])
    }
    fn concat_cols(&mut self, parts: &[&Self::Value]) -> Result<Self::Value> {
        self.apply(Op::ConcatCols, parts)
    }
    fn slice_cols(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value> {
        self.apply(Op::SliceCols { start, end }, &[a])
    }
    fn stop_gradient(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::StopGradient, &[a])
    }
    fn pairwise_sqdist(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::PairwiseSqDist, &[a])
    }
    fn normalize_rows(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::NormalizeRows, &[a])
    }
    fn logsumexp_rows(&mut self, a: &Self::Value, exclude_diagonal: bool) -> Result<Self::Value> {
        self.apply(Op::LogSumExpRows { exclude_diagonal }, &[a])
    }

    /// `x W + b` with `b` broadcast over rows.
    fn affine(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        let xw = self.matmul(x, w)?;
        self.add(&xw, b)
    }
}

/// Plain evaluation, no derivative bookkeeping.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn parameter(&mut self, _key: ParamKey, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        op.forward(inputs)
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
}
