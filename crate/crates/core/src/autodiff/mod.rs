//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in insertion
//! order. Each node keeps its value and whatever the backward rule needs
//! (dropout masks, weight-norm norms, gathered ids), so [`Graph::backward`]
//! can replay the tape in reverse without re-running anything.
//!
//! Trainable tensors live in a [`ParamStore`]; [`Graph::param`] copies a
//! parameter onto the tape and [`ParamStore::accumulate_from`] adds the
//! resulting gradients back into the store. Gradients accumulate across
//! backward calls until explicitly cleared.

pub mod conv;
mod ops;

use std::collections::HashMap;

pub use conv::{receptive_field, ConvSpec, Direction};
pub use ops::{gelu_scalar, softplus_scalar};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub(crate) use ops::Op;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Variable, true)
    }

    /// Leaf bound to a parameter of a [`ParamStore`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Index of the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if upstream.iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(
                    format!("backward node {i} ({})", node.op.name()),
                    "non-finite gradient",
                ));
            }
            if node.op.is_leaf() {
                grads[i] = Some(upstream);
                continue;
            }
            for (input, delta) in self.op_backward(i, &upstream) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                if delta.iter().any(|g| !g.is_finite()) {
                    return Err(Error::numeric(
                        format!("backward node {i} ({})", node.op.name()),
                        "non-finite gradient",
                    ));
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !node.op.is_leaf() {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds the gradients a backward pass left on `graph`'s parameter leaves.
    pub fn accumulate_from(&mut self, graph: &Graph) -> Result<()> {
        for node in &graph.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                self.tensors[id.0].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests;
