//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value, its input
//! handles, and (when any input requires a gradient) a [`Backward`] rule.
//! Nodes are appended after their inputs, so the tape is always in
//! topological order and backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// Returns one entry per input; `None` where `needs[i]` is false.
pub(crate) trait Backward: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf tensor")?;
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push<B: Backward + 'static>(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        op: B,
    ) -> Result<Var> {
        value.ensure_finite("op output")?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node { value, inputs: inputs.to_vec(), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulate d`loss`/d`v` for every node `v` that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Interior gradients are not retained once propagated.
            grads[id] = None;
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| self.nodes[id].op.is_none() && self.nodes[id].requires_grad)
                    .map(|g| Tensor::new(self.nodes[id].value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves that require them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}
