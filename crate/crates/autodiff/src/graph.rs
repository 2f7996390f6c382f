//! Reverse-mode differentiation over a recorded tape.

use std::collections::BTreeMap;

use crate::backend::{Backend, ParamKey};
use crate::error::{AdError, Result};
use crate::op::Op;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf,
    Param(ParamKey),
    Op(Op),
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only tape. Nodes only reference earlier nodes, so the node order is
/// a topological order and the graph is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamKey, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf input. Adjoints are tracked for it so callers can read input
    /// gradients (VJPs) after [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(NodeKind::Leaf, Vec::new(), t)
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Op name of a node, `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        match &self.nodes[v.0].kind {
            NodeKind::Op(op) => Some(op.name()),
            _ => None,
        }
    }

    pub fn param_key(&self, v: Var) -> Option<ParamKey> {
        match self.nodes[v.0].kind {
            NodeKind::Param(k) => Some(k),
            _ => None,
        }
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].inputs.iter().map(|&i| Var(i)).collect()
    }

    /// Propagates `seed` from `output` back to every node that feeds it.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Adjoints> {
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(AdError::SeedShape {
                expected: out_shape,
                got: seed.shape(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.clone());
        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if let NodeKind::Op(op) = &node.kind {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let grads = op.vjp(&inputs, &node.value, &g)?;
                for (&src, gi) in node.inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        accumulate(&mut adj[src], gi);
                    }
                }
            }
            adj[id] = Some(g);
        }
        Ok(Adjoints {
            adj,
            params: self.params.clone(),
        })
    }

    /// Backward from a `1x1` output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Adjoints> {
        self.backward(output, &Tensor::scalar(1.0))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Backend for Graph {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.input(t)
    }

    fn parameter(&mut self, key: ParamKey, t: &Tensor) -> Var {
        if let Some(&id) = self.params.get(&key) {
            return Var(id);
        }
        let v = self.push(NodeKind::Param(key), Vec::new(), t.clone());
        self.params.insert(key, v.0);
        v
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(NodeKind::Op(op), ids, out))
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Adjoints {
    adj: Vec<Option<Tensor>>,
    params: BTreeMap<ParamKey, usize>,
}

impl Adjoints {
    /// Gradient with respect to `v`, `None` if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter registered on the graph. Parameters that do
    /// not reach the output are omitted.
    pub fn gradients(&self) -> Gradients {
        let mut out = BTreeMap::new();
        for (&key, &id) in &self.params {
            if let Some(Some(g)) = self.adj.get(id) {
                out.insert(key, g.clone());
            }
        }
        Gradients(out)
    }
}

/// Parameter gradients keyed by [`ParamKey`], iterated in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<ParamKey, Tensor>);

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.0.get(&key)
    }

    pub fn insert(&mut self, key: ParamKey, g: Tensor) {
        self.0.insert(key, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Euclidean norm over all entries of the gradients in `group`.
    pub fn group_norm(&self, group: u16) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| k.group == group)
            .map(|(_, g)| g.dot(g))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_group(&mut self, group: u16, c: f64) {
        for (k, g) in self.0.iter_mut() {
            if k.group == group {
                for x in g.data_mut() {
                    *x *= c;
                }
            }
        }
    }
}
