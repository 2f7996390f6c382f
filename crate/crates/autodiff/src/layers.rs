//! Dense layers and multi-layer perceptrons written against [`Backend`].

use crate::backend::{Backend, ParamKey};
use crate::error::{AdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply<B: Backend>(self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        match self {
            Activation::Identity => Ok(x.clone()),
            Activation::Tanh => b.tanh(x),
            Activation::Relu => b.relu(x),
            Activation::Softplus => b.softplus(x),
        }
    }
}

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(AdError::ShapeMismatch {
                op: "linear",
                lhs: weight.shape(),
                rhs: bias.shape(),
            });
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of [`Linear`] layers with one activation after every hidden layer and
/// a separate activation after the last.
///
/// Parameter keys are `(group, base + 2*layer)` for weights and
/// `(group, base + 2*layer + 1)` for biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(AdError::Invalid("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(AdError::ShapeMismatch {
                    op: "mlp",
                    lhs: pair[0].weight.shape(),
                    rhs: pair[1].weight.shape(),
                });
            }
        }
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn forward<B: Backend>(&self, b: &mut B, group: u16, base: u16, x: &B::Value) -> Result<B::Value> {
        let got = b.value(x).cols();
        if got != self.input_dim() {
            return Err(AdError::ShapeMismatch {
                op: "mlp input",
                lhs: [b.value(x).rows(), got],
                rhs: self.layers[0].weight.shape(),
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let idx = base + 2 * i as u16;
            let w = b.parameter(ParamKey::new(group, idx), &layer.weight);
            let bias = b.parameter(ParamKey::new(group, idx + 1), &layer.bias);
            let pre = b.affine(&h, &w, &bias)?;
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply(b, &pre)?;
        }
        Ok(h)
    }
}
