//! Small dense-tensor autodiff: rank-2 `f64` tensors, a fixed op set, a tape
//! for reverse-mode gradients and dual numbers for Jacobian-vector products.
//!
//! Programs are written once against [`Backend`] and can then be evaluated
//! ([`Eval`]), differentiated forward ([`Dual`]) or recorded for a backward
//! sweep ([`Graph`]).

mod backend;
mod dual;
mod error;
mod function;
mod graph;
pub mod layers;
mod op;
mod tensor;

pub use backend::{Backend, Eval, ParamKey};
pub use dual::{Dual, DualTensor};
pub use error::{AdError, Result};
pub use function::{evaluate, jvp, vjp, Function};
pub use graph::{Adjoints, Gradients, Graph, Var};
pub use op::{Op, ZERO_NORM};
pub use tensor::Tensor;
