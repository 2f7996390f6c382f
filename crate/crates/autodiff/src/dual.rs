//! Forward-mode differentiation with tensor-valued dual numbers.

use crate::backend::{Backend, ParamKey};
use crate::error::{AdError, Result};
use crate::op::Op;
use crate::tensor::Tensor;

/// A primal value paired with its tangent (directional derivative).
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(AdError::ShapeMismatch {
                op: "dual",
                lhs: primal.shape(),
                rhs: tangent.shape(),
            });
        }
        Ok(DualTensor { primal, tangent })
    }

    pub fn constant(primal: Tensor) -> Self {
        let tangent = Tensor::zeros(primal.rows(), primal.cols());
        DualTensor { primal, tangent }
    }
}

/// Evaluates a program once, propagating tangents alongside primals.
/// Parameters are constants: their tangent is zero.
#[derive(Debug, Default, Clone, Copy)]
pub struct Dual;

impl Backend for Dual {
    type Value = DualTensor;

    fn constant(&mut self, t: Tensor) -> DualTensor {
        DualTensor::constant(t)
    }

    fn parameter(&mut self, _key: ParamKey, t: &Tensor) -> DualTensor {
        DualTensor::constant(t.clone())
    }

    fn apply(&mut self, op: Op, inputs: &[&DualTensor]) -> Result<DualTensor> {
        let primals: Vec<&Tensor> = inputs.iter().map(|d| &d.primal).collect();
        let tangents: Vec<&Tensor> = inputs.iter().map(|d| &d.tangent).collect();
        let primal = op.forward(&primals)?;
        let tangent = op.tangent(&primals, &tangents, &primal)?;
        Ok(DualTensor { primal, tangent })
    }

    fn value<'a>(&'a self, v: &'a DualTensor) -> &'a Tensor {
        &v.primal
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut d = Dual;
        let x = DualTensor::new(Tensor::scalar(3.0), Tensor::scalar(1.0)).unwrap();
        let y = d.mul(&x, &x).unwrap();
        assert_eq!(y.primal.item(), 9.0);
        assert_eq!(y.tangent.item(), 6.0);
    }

    #[test]
    fn stop_gradient_blocks_tangent() {
        let mut d = Dual;
        let x = DualTensor::new(Tensor::scalar(2.0), Tensor::scalar(1.0)).unwrap();
        let y = d.stop_gradient(&x).unwrap();
        assert_eq!(y.primal.item(), 2.0);
        assert_eq!(y.tangent.item(), 0.0);
    }

    #[test]
    fn mismatched_tangent_rejected() {
        assert!(DualTensor::new(Tensor::zeros(1, 2), Tensor::zeros(2, 1)).is_err());
    }
}
