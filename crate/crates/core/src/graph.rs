//! Static computation graphs with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order and may only reference earlier
//! nodes, so the insertion order is a topological order and the graph is
//! acyclic by construction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvParams};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Named tensors fed to the graph's `Input` nodes.
pub type Feeds = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { name: String },
    Param { name: String },
    /// inputs: `[x, weights, bias]`
    Conv2d(ConvParams),
    /// inputs: `[x, weights]`
    ConvTranspose2d { stride: usize },
    Crop { border: usize },
    MaxPool2,
    AvgPool { factor: usize },
    Subsample { factor: usize },
    /// inputs: `[a, b]`
    Concat,
    Relu,
    Softmax,
    /// inputs: `[a, b]`
    Add,
    /// inputs: `[logits, labels]`; scalar output
    MaskedCrossEntropy,
    /// inputs: `[x, weights]`; scalar `sum(x * weights)`
    WeightedSum,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv2d(_) => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Crop { .. } => "crop",
            Op::MaxPool2 => "maxpool2",
            Op::AvgPool { .. } => "avgpool",
            Op::Subsample { .. } => "subsample",
            Op::Concat => "concat",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Add => "add",
            Op::MaskedCrossEntropy => "masked_cross_entropy",
            Op::WeightedSum => "weighted_sum",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input { .. } | Op::Param { .. } => 0,
            Op::Conv2d(_) => 3,
            Op::ConvTranspose2d { .. } | Op::Concat | Op::Add | Op::MaskedCrossEntropy | Op::WeightedSum => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Parameter>,
}

/// Per-node side results a backward pass needs.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    LogitGrad(Tensor),
}

/// Values of every node from one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor {
        self.values.swap_remove(id)
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node's output, if the loss
    /// depends on it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }

    pub fn params(&self) -> &BTreeMap<String, Parameter> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.as_str())
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        slot.value.expect_same_shape(&value)?;
        slot.value = value;
        Ok(())
    }

    pub fn push(&mut self, op: Op, inputs: &[NodeId], label: impl Into<String>) -> Result<NodeId> {
        if inputs.len() != op.arity() {
            return Err(Error::invalid(format!(
                "{} takes {} inputs, got {}",
                op.kind(),
                op.arity(),
                inputs.len()
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::invalid(format!("input node {bad} does not exist yet")));
        }
        if let Op::Param { name } = &op {
            if !self.params.contains_key(name) {
                return Err(Error::invalid(format!("parameter `{name}` was not registered")));
            }
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            label: label.into(),
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, &[], name)
            .expect("input nodes have no dependencies")
    }

    /// Registers a parameter and returns the node reading it.
    pub fn parameter(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.to_string(), Parameter { value, trainable });
        self.push(Op::Param { name: name.to_string() }, &[], name)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, p: ConvParams, label: &str) -> Result<NodeId> {
        self.push(Op::Conv2d(p), &[x, w, b], label)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, label: &str) -> Result<NodeId> {
        self.push(Op::ConvTranspose2d { stride }, &[x, w], label)
    }

    pub fn unary(&mut self, op: Op, x: NodeId, label: &str) -> Result<NodeId> {
        self.push(op, &[x], label)
    }

    pub fn binary(&mut self, op: Op, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        self.push(op, &[a, b], label)
    }

    pub fn forward(&self, feeds: &Feeds) -> Result<Evaluation> {
        self.forward_until(feeds, self.nodes.len().saturating_sub(1))
    }

    /// Evaluates nodes `0..=last` only; later nodes (and their inputs) are
    /// not required.
    pub fn forward_until(&self, feeds: &Feeds, last: NodeId) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(last + 1);
        let mut aux = Vec::with_capacity(last + 1);
        for node in self.nodes.iter().take(last + 1) {
            let arg = |i: usize| &values[node.inputs[i]];
            let (value, extra) = match &node.op {
                Op::Input { name } => {
                    let t = feeds
                        .get(name)
                        .ok_or_else(|| Error::invalid(format!("missing graph input `{name}`")))?;
                    (t.clone(), Aux::None)
                }
                Op::Param { name } => (self.params[name].value.clone(), Aux::None),
                Op::Conv2d(p) => (ops::conv2d(arg(0), arg(1), arg(2), *p)?, Aux::None),
                Op::ConvTranspose2d { stride } => (ops::conv_transpose2d(arg(0), arg(1), *stride)?, Aux::None),
                Op::Crop { border } => (ops::crop(arg(0), *border)?, Aux::None),
                Op::MaxPool2 => {
                    let (y, idx) = ops::maxpool2(arg(0))?;
                    (y, Aux::Argmax(idx))
                }
                Op::AvgPool { factor } => (ops::avgpool(arg(0), *factor)?, Aux::None),
                Op::Subsample { factor } => (ops::subsample(arg(0), *factor)?, Aux::None),
                Op::Concat => (ops::concat_channels(arg(0), arg(1))?, Aux::None),
                Op::Relu => (ops::relu(arg(0)), Aux::None),
                Op::Softmax => (ops::softmax_channel(arg(0))?, Aux::None),
                Op::Add => (arg(0).zip_map(arg(1), |a, b| a + b)?, Aux::None),
                Op::MaskedCrossEntropy => {
                    let (loss, grad) = ops::masked_cross_entropy(arg(0), arg(1))?;
                    (Tensor::scalar(loss), Aux::LogitGrad(grad))
                }
                Op::WeightedSum => (Tensor::scalar(arg(0).dot(arg(1))?), Aux::None),
            };
            values.push(value);
            aux.push(extra);
        }
        Ok(Evaluation { values, aux })
    }

    /// Gradients of the scalar node `loss` with respect to every node it
    /// depends on and every trainable parameter. Trainable parameters the
    /// loss does not depend on get all-zero gradients.
    pub fn backward(&self, eval: &Evaluation, loss: NodeId) -> Result<Gradients> {
        if loss >= eval.values.len() {
            return Err(Error::invalid(format!("loss node {loss} was not evaluated")));
        }
        if !eval.values[loss].is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, node `{}` has shape {:?}",
                self.nodes[loss].label,
                eval.values[loss].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::full(eval.values[loss].shape(), 1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |i: usize| &eval.values[node.inputs[i]];
            let contributions: Vec<(usize, Tensor)> = match &node.op {
                Op::Input { .. } | Op::Param { .. } => vec![],
                Op::Conv2d(p) => {
                    let (gx, gw, gb) = ops::conv2d_backward(val(0), val(1), &g, *p)?;
                    vec![(0, gx), (1, gw), (2, gb)]
                }
                Op::ConvTranspose2d { stride } => {
                    let (gx, gw) = ops::conv_transpose2d_backward(val(0), val(1), &g, *stride)?;
                    vec![(0, gx), (1, gw)]
                }
                Op::Crop { border } => vec![(0, ops::crop_backward(val(0).shape(), &g, *border)?)],
                Op::MaxPool2 => {
                    let Aux::Argmax(idx) = &eval.aux[id] else {
                        return Err(Error::Invariant("maxpool evaluated without argmax".into()));
                    };
                    vec![(0, ops::maxpool2_backward(val(0).shape(), idx, &g)?)]
                }
                Op::AvgPool { factor } => vec![(0, ops::avgpool_backward(val(0).shape(), &g, *factor)?)],
                Op::Subsample { factor } => vec![(0, ops::subsample_backward(val(0).shape(), &g, *factor)?)],
                Op::Concat => {
                    let (ga, gb) = ops::concat_channels_backward(val(0).shape(), val(1).shape(), &g)?;
                    vec![(0, ga), (1, gb)]
                }
                Op::Relu => vec![(0, ops::relu_backward(val(0), &g)?)],
                Op::Softmax => vec![(0, ops::softmax_channel_backward(&eval.values[id], &g)?)],
                Op::Add => vec![(0, g.clone()), (1, g.clone())],
                Op::MaskedCrossEntropy => {
                    let Aux::LogitGrad(lg) = &eval.aux[id] else {
                        return Err(Error::Invariant("loss evaluated without gradient".into()));
                    };
                    // labels are data, not a differentiable input
                    vec![(0, lg.scale(g.item()))]
                }
                Op::WeightedSum => {
                    let s = g.item();
                    vec![(0, val(1).scale(s)), (1, val(0).scale(s))]
                }
            };
            for (slot, contrib) in contributions {
                let target = node.inputs[slot];
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    empty => *empty = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (name, p) in &self.params {
            if !p.trainable {
                continue;
            }
            let mut total = Tensor::zeros(p.value.shape());
            for (id, node) in self.nodes.iter().enumerate() {
                if matches!(&node.op, Op::Param { name: n } if n == name) {
                    if let Some(g) = &grads[id] {
                        total.add_assign(g)?;
                    }
                }
            }
            params.insert(name.clone(), total);
        }
        Ok(Gradients { nodes: grads, params })
    }

    /// Forward pass returning only the scalar value of `loss`.
    pub fn eval_scalar(&self, feeds: &Feeds, loss: NodeId) -> Result<f64> {
        let eval = self.forward(feeds)?;
        let v = eval.value(loss);
        if !v.is_scalar() {
            return Err(Error::shape("expected a scalar node"));
        }
        Ok(v.item())
    }
}
