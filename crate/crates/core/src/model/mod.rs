//! The network being compressed: quantizable layers, FP-only normalization
//! parameters, and a small dataflow graph that wires them together.

mod format;
mod toy;

pub use format::{
    fingerprint, load_model, model_from_bytes, model_to_bytes, save_model, write_atomic, MODEL_MAGIC, MODEL_VERSION,
};
pub use toy::{build_toy_encoder, EncoderConfig};
pub(crate) use format::{read_header, write_blob, write_header, BlobMeta, BlobReader};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Op};
use crate::tape::{NodeId, Tape};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    Linear,
    AttnQ,
    AttnK,
    AttnV,
    AttnOut,
    Ffn1,
    Ffn2,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        self == LayerKind::Conv1d
    }
}

/// Distribution family of a layer's input, which decides whether its
/// activation quantizer uses one affine range or two half-ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationTag {
    None,
    Gelu,
    SoftmaxContext,
}

impl ActivationTag {
    pub fn is_two_range(self) -> bool {
        self != ActivationTag::None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: ActivationTag,
    pub quantizable: bool,
    /// Convolution stride; 1 for linear layers.
    pub stride: usize,
}

impl LayerSpec {
    /// `|W_l|`: weight elements plus bias elements.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Applies the layer in floating point with the given (possibly substituted) weights.
    pub fn apply_with(&self, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        if self.kind.is_conv() {
            ops::conv1d(x, weight, bias, self.stride)
        } else {
            ops::linear(x, weight, bias)
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_with(x, &self.weight, self.bias.as_ref())
    }

    fn op(&self, dtype: DType) -> Op {
        let weight = self.weight.to_dtype(dtype);
        let bias = self.bias.as_ref().map(|b| b.to_dtype(dtype));
        if self.kind.is_conv() {
            Op::Conv1d {
                weight,
                bias,
                stride: self.stride,
            }
        } else {
            Op::Linear { weight, bias }
        }
    }

    fn check_weight_shape(&self) -> Result<()> {
        let w = self.weight.shape();
        let ok = if self.kind.is_conv() { w.len() == 3 } else { w.len() == 2 };
        if !ok {
            return Err(Error::Config(format!(
                "layer {} ({:?}) has weight shape {w:?}",
                self.index, self.kind
            )));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [w[0]] {
                return Err(Error::Config(format!(
                    "layer {} bias shape {:?} does not match {} outputs",
                    self.index,
                    b.shape(),
                    w[0]
                )));
            }
        }
        if self.kind.is_conv() && self.stride == 0 {
            return Err(Error::Config(format!("layer {} has stride 0", self.index)));
        }
        Ok(())
    }
}

/// LayerNorm parameters. Kept in floating point and outside budget accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl NormParams {
    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GraphOp {
    Input,
    Layer { layer: usize },
    Gelu,
    LayerNorm { norm: usize },
    Add,
    Transpose,
    AttnScores { heads: usize },
    /// Softmax over the last axis.
    Softmax,
    AttnContext { heads: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    #[serde(flatten)]
    pub op: GraphOp,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub norms: Vec<NormParams>,
    pub nodes: Vec<GraphNode>,
    pub config: Option<EncoderConfig>,
    /// `layer_nodes[l]` is the graph node computing layer `l`.
    layer_nodes: Vec<usize>,
}

/// Replaces the floating-point evaluation of quantizable layers during graph execution.
pub trait LayerExecutor {
    fn run_layer(&mut self, layer: &LayerSpec, input: &Tensor) -> Result<Tensor>;
}

/// Plain floating-point layers.
pub struct FloatLayers;

impl LayerExecutor for FloatLayers {
    fn run_layer(&mut self, layer: &LayerSpec, input: &Tensor) -> Result<Tensor> {
        layer.apply(input)
    }
}

impl<F> LayerExecutor for F
where
    F: FnMut(&LayerSpec, &Tensor) -> Result<Tensor>,
{
    fn run_layer(&mut self, layer: &LayerSpec, input: &Tensor) -> Result<Tensor> {
        self(layer, input)
    }
}

/// Values of every graph node from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub values: Vec<Tensor>,
    layer_nodes: Vec<usize>,
    layer_inputs: Vec<usize>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.values.last().expect("graphs have at least one node")
    }

    /// `o_l`: the output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &Tensor {
        &self.values[self.layer_nodes[l]]
    }

    /// `X_l`: the input of layer `l`.
    pub fn layer_input(&self, l: usize) -> &Tensor {
        &self.values[self.layer_inputs[l]]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_nodes.len()
    }

    pub fn into_layer_outputs(self) -> Vec<Tensor> {
        self.layer_nodes.iter().map(|&n| self.values[n].clone()).collect()
    }
}

impl ModelGraph {
    /// Assembles and validates a graph. Shapes are checked by a dry run on a
    /// zero input of `input_shape`.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        norms: Vec<NormParams>,
        nodes: Vec<GraphNode>,
        config: Option<EncoderConfig>,
    ) -> Result<Self> {
        if nodes.first().map(|n| &n.op) != Some(&GraphOp::Input) {
            return Err(Error::Config("first graph node must be the input".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.index != i {
                return Err(Error::Config(format!(
                    "layer indices must be consecutive: position {i} holds index {}",
                    l.index
                )));
            }
            l.check_weight_shape()?;
        }
        let mut layer_nodes = vec![usize::MAX; layers.len()];
        for (id, node) in nodes.iter().enumerate() {
            let arity = match node.op {
                GraphOp::Input => 0,
                GraphOp::Add | GraphOp::AttnScores { .. } | GraphOp::AttnContext { .. } => 2,
                _ => 1,
            };
            if node.inputs.len() != arity {
                return Err(Error::Config(format!(
                    "node {id} ({:?}) needs {arity} inputs, has {}",
                    node.op,
                    node.inputs.len()
                )));
            }
            if id > 0 && node.op == GraphOp::Input {
                return Err(Error::Config(format!("node {id}: only node 0 may be an input")));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= id) {
                return Err(Error::Config(format!(
                    "node {id} reads node {bad}, which does not precede it"
                )));
            }
            match node.op {
                GraphOp::Layer { layer } => {
                    let slot = layer_nodes.get_mut(layer).ok_or_else(|| {
                        Error::Config(format!("node {id} refers to missing layer {layer}"))
                    })?;
                    if *slot != usize::MAX {
                        return Err(Error::Config(format!("layer {layer} is used by two nodes")));
                    }
                    *slot = id;
                }
                GraphOp::LayerNorm { norm } if norm >= norms.len() => {
                    return Err(Error::Config(format!("node {id} refers to missing norm {norm}")));
                }
                _ => {}
            }
        }
        if let Some(l) = layer_nodes.iter().position(|&n| n == usize::MAX) {
            return Err(Error::Config(format!("layer {l} is not used by the graph")));
        }
        let graph = Self {
            name: name.into(),
            input_shape,
            layers,
            norms,
            nodes,
            config,
            layer_nodes,
        };
        let probe = Tensor::zeros(graph.input_shape.clone(), DType::F64)
            .map_err(|e| Error::Config(format!("bad input shape: {e}")))?;
        graph.execute(&probe, &mut FloatLayers)?;
        Ok(graph)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Precision of the stored weights.
    pub fn dtype(&self) -> DType {
        self.layers
            .iter()
            .fold(DType::F64, |d, l| d.promote(l.weight.dtype()))
    }

    /// `|W_l|` for every layer, bias included, LayerNorm excluded.
    pub fn param_count(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::param_count).collect()
    }

    pub fn total_params(&self) -> usize {
        self.param_count().iter().sum()
    }

    pub fn norm_param_count(&self) -> usize {
        self.norms.iter().map(NormParams::param_count).sum()
    }

    /// Graph node that computes layer `l`.
    pub fn layer_node(&self, l: usize) -> usize {
        self.layer_nodes[l]
    }

    /// Graph node feeding layer `l`.
    pub fn layer_input_node(&self, l: usize) -> usize {
        self.nodes[self.layer_nodes[l]].inputs[0]
    }

    /// Number of output classes per frame.
    pub fn vocab(&self) -> Option<usize> {
        self.layers.last().map(|l| l.weight.shape()[0])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::dim("model input", &self.input_shape, x.shape()));
        }
        Ok(())
    }

    fn non_layer_op(&self, op: &GraphOp, dtype: DType) -> Op {
        match op {
            GraphOp::Gelu => Op::Gelu,
            GraphOp::LayerNorm { norm } => {
                let p = &self.norms[*norm];
                Op::LayerNorm {
                    gamma: p.gamma.to_dtype(dtype),
                    beta: p.beta.to_dtype(dtype),
                    eps: p.eps,
                }
            }
            GraphOp::Add => Op::Add,
            GraphOp::Transpose => Op::Transpose,
            GraphOp::AttnScores { heads } => Op::AttnScores { heads: *heads },
            GraphOp::Softmax => Op::Softmax { axis: 2 },
            GraphOp::AttnContext { heads } => Op::AttnContext { heads: *heads },
            GraphOp::Input | GraphOp::Layer { .. } => unreachable!("handled by the executor"),
        }
    }

    /// Runs the graph, delegating every layer to `exec`. Non-layer nodes run
    /// in the precision of their inputs.
    pub fn execute(&self, x: &Tensor, exec: &mut impl LayerExecutor) -> Result<Trace> {
        self.check_input(x)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                GraphOp::Input => x.clone(),
                GraphOp::Layer { layer } => {
                    let spec = &self.layers[*layer];
                    exec.run_layer(spec, &values[node.inputs[0]])
                        .map_err(|e| e.at_layer(*layer))?
                }
                op => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    let dtype = inputs.iter().fold(DType::F64, |d, t| d.promote(t.dtype()));
                    self.non_layer_op(op, dtype).forward(&inputs).map_err(|e| {
                        Error::Tensor(format!("graph node {id} ({op:?}): {e}"))
                    })?
                }
            };
            values.push(value);
        }
        Ok(Trace {
            values,
            layer_nodes: self.layer_nodes.clone(),
            layer_inputs: (0..self.layers.len()).map(|l| self.layer_input_node(l)).collect(),
        })
    }

    /// Logits in model precision.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.to_dtype(self.dtype());
        Ok(self.execute(&x, &mut FloatLayers)?.logits().clone())
    }

    /// Full trace in model precision.
    pub fn trace(&self, x: &Tensor) -> Result<Trace> {
        let x = x.to_dtype(self.dtype());
        self.execute(&x, &mut FloatLayers)
    }

    /// Double-precision forward pass that records a tape. Returns the output
    /// of every layer in graph order together with the tape.
    pub fn forward_with_tape(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tape)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let mut ids: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<NodeId> = node.inputs.iter().map(|&i| ids[i]).collect();
            let nid = match &node.op {
                GraphOp::Input => tape.input(x.to_dtype(DType::F64)),
                GraphOp::Layer { layer } => {
                    let nid = tape
                        .apply(self.layers[*layer].op(DType::F64), &inputs)
                        .map_err(|e| e.at_layer(*layer))?;
                    tape.mark_layer(*layer, nid)?;
                    nid
                }
                op => tape
                    .apply(self.non_layer_op(op, DType::F64), &inputs)
                    .map_err(|e| Error::Tensor(format!("graph node {id} ({op:?}): {e}")))?,
            };
            ids.push(nid);
        }
        let outputs = (0..self.layers.len())
            .map(|l| tape.value(ids[self.layer_nodes[l]]).clone())
            .collect();
        Ok((outputs, tape))
    }
}

/// Incremental construction of a [`ModelGraph`].
///
/// ```
/// use myq_core::model::{GraphBuilder, LayerKind};
/// use myq_core::tensor::Tensor;
///
/// let mut g = GraphBuilder::new("identity", vec![1, 3]);
/// let x = g.input();
/// let w = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
/// g.conv1d(x, w, None, 1);
/// let model = g.finish().unwrap();
/// assert_eq!(model.param_count(), vec![1]);
/// ```
pub struct GraphBuilder {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    norms: Vec<NormParams>,
    nodes: Vec<GraphNode>,
    config: Option<EncoderConfig>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            input_shape,
            layers: Vec::new(),
            norms: Vec::new(),
            nodes: Vec::new(),
            config: None,
        }
    }

    pub fn with_config(mut self, config: EncoderConfig) -> Self {
        self.config = Some(config);
        self
    }

    fn push(&mut self, op: GraphOp, inputs: Vec<usize>) -> usize {
        self.nodes.push(GraphNode { op, inputs });
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> usize {
        self.push(GraphOp::Input, vec![])
    }

    fn tag_for(&self, input: usize) -> ActivationTag {
        match self.nodes.get(input).map(|n| &n.op) {
            Some(GraphOp::Gelu) => ActivationTag::Gelu,
            Some(GraphOp::AttnContext { .. }) => ActivationTag::SoftmaxContext,
            _ => ActivationTag::None,
        }
    }

    fn layer(&mut self, input: usize, kind: LayerKind, weight: Tensor, bias: Option<Tensor>, stride: usize) -> usize {
        let index = self.layers.len();
        let activation = self.tag_for(input);
        self.layers.push(LayerSpec {
            index,
            kind,
            weight,
            bias,
            activation,
            quantizable: true,
            stride,
        });
        self.push(GraphOp::Layer { layer: index }, vec![input])
    }

    pub fn conv1d(&mut self, input: usize, weight: Tensor, bias: Option<Tensor>, stride: usize) -> usize {
        self.layer(input, LayerKind::Conv1d, weight, bias, stride)
    }

    /// A linear layer of the given kind (`Linear`, `AttnQ`, `Ffn1`, ...).
    pub fn linear(&mut self, input: usize, kind: LayerKind, weight: Tensor, bias: Option<Tensor>) -> usize {
        self.layer(input, kind, weight, bias, 1)
    }

    pub fn gelu(&mut self, input: usize) -> usize {
        self.push(GraphOp::Gelu, vec![input])
    }

    pub fn layernorm(&mut self, input: usize, gamma: Tensor, beta: Tensor, eps: f64) -> usize {
        self.norms.push(NormParams { gamma, beta, eps });
        let norm = self.norms.len() - 1;
        self.push(GraphOp::LayerNorm { norm }, vec![input])
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(GraphOp::Add, vec![a, b])
    }

    pub fn transpose(&mut self, input: usize) -> usize {
        self.push(GraphOp::Transpose, vec![input])
    }

    /// Multi-head self-attention core: scores, softmax, context.
    pub fn attention(&mut self, q: usize, k: usize, v: usize, heads: usize) -> usize {
        let s = self.push(GraphOp::AttnScores { heads }, vec![q, k]);
        let p = self.push(GraphOp::Softmax, vec![s]);
        self.push(GraphOp::AttnContext { heads }, vec![p, v])
    }

    pub fn finish(self) -> Result<ModelGraph> {
        ModelGraph::new(self.name, self.input_shape, self.layers, self.norms, self.nodes, self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn param_counts_include_bias() {
        let mut g = GraphBuilder::new("lin", vec![4, 4]);
        let x = g.input();
        g.linear(x, LayerKind::Linear, t(&[4, 4], &[0.1; 16]), Some(t(&[4], &[0.0; 4])));
        assert_eq!(g.finish().unwrap().param_count(), vec![20]);

        let mut g = GraphBuilder::new("conv", vec![3, 8]);
        let x = g.input();
        g.conv1d(x, t(&[2, 3, 5], &[0.1; 30]), None, 1);
        assert_eq!(g.finish().unwrap().param_count(), vec![30]);
    }

    #[test]
    fn shape_error_names_layer() {
        let mut g = GraphBuilder::new("bad", vec![2, 3]);
        let x = g.input();
        let a = g.linear(x, LayerKind::Linear, t(&[3, 3], &[0.0; 9]), None);
        g.linear(a, LayerKind::Linear, t(&[2, 2], &[0.0; 4]), None);
        let err = g.finish().unwrap_err();
        assert_eq!(err.layer(), Some(1), "{err}");
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let mut g = GraphBuilder::new("lin", vec![2, 3]);
        let x = g.input();
        g.linear(x, LayerKind::Linear, t(&[3, 3], &[0.0; 9]), None);
        let m = g.finish().unwrap();
        assert!(m.forward(&t(&[3, 3], &[0.0; 9])).is_err());
    }

    #[test]
    fn activation_tags_follow_producers() {
        let mut g = GraphBuilder::new("tags", vec![2, 2]);
        let x = g.input();
        let a = g.linear(x, LayerKind::Ffn1, t(&[2, 2], &[1., 0., 0., 1.]), None);
        let h = g.gelu(a);
        g.linear(h, LayerKind::Ffn2, t(&[2, 2], &[1., 0., 0., 1.]), None);
        let m = g.finish().unwrap();
        assert_eq!(m.layers[0].activation, ActivationTag::None);
        assert_eq!(m.layers[1].activation, ActivationTag::Gelu);
    }
}
