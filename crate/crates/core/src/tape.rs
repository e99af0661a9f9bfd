//! Reverse-mode tape over [`Op`]s.
//!
//! Nodes are appended in execution order, so the node list is always a
//! topological order. Selected nodes are registered as layer outputs and
//! [`Tape::backward`] returns the loss gradient at each of them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::tensor::{DType, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
struct Node {
    op: Option<Op>,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    layers: BTreeMap<usize, NodeId>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf value.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
        });
        self.nodes.len() - 1
    }

    /// Evaluates `op` on recorded nodes and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Usage(format!("tape has no node {bad}")));
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
            op.forward(&vals)?
        };
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Registers `node` as the output of layer `layer`.
    pub fn mark_layer(&mut self, layer: usize, node: NodeId) -> Result<()> {
        if node >= self.nodes.len() {
            return Err(Error::Usage(format!("tape has no node {node}")));
        }
        if self.layers.insert(layer, node).is_some() {
            return Err(Error::Usage(format!("layer {layer} already has an output node")));
        }
        Ok(())
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The final recorded value.
    pub fn output(&self) -> Option<&Tensor> {
        self.nodes.last().map(|n| &n.value)
    }

    pub fn layer_node(&self, layer: usize) -> Option<NodeId> {
        self.layers.get(&layer).copied()
    }

    /// Back-propagates `loss_grad` (∂L/∂output, where output is the last node)
    /// and returns ∂L/∂o for every registered layer output.
    ///
    /// A tape can be consumed only once.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        if self.consumed {
            return Err(Error::Usage("tape has already been consumed by backward".into()));
        }
        let last = self
            .nodes
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Usage("backward on an empty tape".into()))?;
        if loss_grad.shape() != self.nodes[last].value.shape() {
            return Err(Error::dim(
                "backward",
                self.nodes[last].value.shape(),
                loss_grad.shape(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[last] = Some(loss_grad.to_dtype(DType::F64));
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let input_grads = op.vjp(&inputs, &node.value, &g)?;
                for (&src, ig) in node.inputs.iter().zip(input_grads) {
                    grads[src] = Some(match grads[src].take() {
                        Some(acc) => crate::ops::add(&acc, &ig)?,
                        None => ig,
                    });
                }
            }
            grads[id] = Some(g);
        }

        let zero = |id: NodeId| Tensor::zeros(self.nodes[id].value.shape().to_vec(), DType::F64);
        self.layers
            .iter()
            .map(|(&layer, &id)| {
                let g = match grads[id].take() {
                    Some(g) => g,
                    None => zero(id)?,
                };
                Ok((layer, g))
            })
            .collect()
    }
}
