use crate::backend::{Backend, Eval};
use crate::dual::{Dual, DualTensor};
use crate::error::{AdError, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// A differentiable program of several tensor inputs and one tensor output.
///
/// Implementations must build their result only from backend ops, so that the
/// same definition can be evaluated, pushed forward, or pulled back.
pub trait Function {
    fn arity(&self) -> usize;

    fn apply<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> Result<B::Value>;
}

fn check_inputs<F: Function>(f: &F, inputs: &[Tensor]) -> Result<()> {
    if inputs.len() != f.arity() {
        return Err(AdError::Arity {
            op: "function",
            expected: f.arity(),
            got: inputs.len(),
        });
    }
    Ok(())
}

pub fn evaluate<F: Function>(f: &F, inputs: &[Tensor]) -> Result<Tensor> {
    check_inputs(f, inputs)?;
    let mut b = Eval;
    f.apply(&mut b, inputs)
}

/// Value and directional derivative `J_f(inputs) . tangents` in one dual pass.
pub fn jvp<F: Function>(f: &F, inputs: &[Tensor], tangents: &[Tensor]) -> Result<(Tensor, Tensor)> {
    check_inputs(f, inputs)?;
    if tangents.len() != inputs.len() {
        return Err(AdError::Arity {
            op: "jvp tangents",
            expected: inputs.len(),
            got: tangents.len(),
        });
    }
    let duals = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| DualTensor::new(x.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut b = Dual;
    let out = f.apply(&mut b, &duals)?;
    Ok((out.primal, out.tangent))
}

/// Value and input cotangents `c^T J_f(inputs)` by one backward sweep.
pub fn vjp<F: Function>(f: &F, inputs: &[Tensor], cotangent: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    check_inputs(f, inputs)?;
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f.apply(&mut g, &vars)?;
    let adj = g.backward(out, cotangent)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            adj.wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
        })
        .collect();
    Ok((g.value(&out).clone(), grads))
}
