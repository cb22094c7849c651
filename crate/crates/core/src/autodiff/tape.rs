use crate::error::{Error, Result};

use super::ops::Op;
use super::tensor::Tensor;

/// Index of a value node on a [`Tape`].
pub type NodeId = usize;

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Wengert list: every operation applied during a forward pass is recorded
/// in order, then replayed in reverse to accumulate adjoints.
///
/// A tape owns one computation graph. Graphs for different samples are
/// independent; each runs on its own tape and tapes are never shared
/// between threads. Replay order is the creation order, so gradients are
/// bitwise reproducible for identical inputs.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by `NodeId`.
pub struct Gradients {
    pub(crate) slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a node, or `None` when the node does not require one
    /// (or was unreachable from the backward seed).
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }

    /// Gradient as a tensor shaped like the node value, zeros when absent.
    pub fn tensor(&self, tape: &Tape, id: NodeId) -> Tensor {
        let shape = tape.value(id).shape().to_vec();
        match self.get(id) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Record an input node. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Record a constant the graph does not differentiate through.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    pub(crate) fn inputs_require_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    /// Reverse pass from a scalar node. Every node reachable from `output`
    /// that requires a gradient receives its fully accumulated adjoint.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output];
        if !out.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward starts from a scalar, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads = Gradients { slots: vec![None; self.nodes.len()] };
        if !out.requires_grad {
            return Ok(grads);
        }
        grads.slots[output] = Some(vec![1.0]);
        for id in (0..=output).rev() {
            if grads.slots[id].is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            // Adjoints accumulate additively: a node feeding several
            // consumers receives the sum of all its adjoint paths.
            let upstream = grads.slots[id].take().expect("checked above");
            self.apply_adjoint(id, &upstream, &mut grads);
            grads.slots[id] = Some(upstream);
        }
        Ok(grads)
    }

    pub(crate) fn accumulate(
        grads: &mut Gradients,
        tape_nodes: &[Node],
        id: NodeId,
        contribution: impl Iterator<Item = f64>,
    ) {
        if !tape_nodes[id].requires_grad {
            return;
        }
        let slot = grads.slots[id]
            .get_or_insert_with(|| vec![0.0; tape_nodes[id].value.numel()]);
        for (dst, add) in slot.iter_mut().zip(contribution) {
            *dst += add;
        }
    }
}
