//! Layer graph with quantizer attachments.
//!
//! Values are numbered: `0` is the model input and `i + 1` is the output
//! of node `i`. Nodes are stored in topological order.

use crate::error::{Error, Result};
use crate::format::MinifloatFormat;
use crate::quant::{QuantizerState, SteMode};
use crate::tensor::Tensor;

/// Full-precision master tensor and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub master: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(master: Tensor) -> Self {
        let grad = Tensor::zeros(master.shape());
        Self { master, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Weight and activation quantizers of one layer. The activation quantizer
/// is absent on layers whose output feeds the loss directly.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantAttachment {
    pub weight: QuantizerState,
    pub activation: Option<QuantizerState>,
    pub enabled: bool,
}

/// Formats used when attaching quantizers to a freshly built model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantTemplate {
    pub weight: MinifloatFormat,
    pub activation: MinifloatFormat,
}

impl QuantTemplate {
    pub fn attachment(&self, quantize_output: bool) -> QuantAttachment {
        QuantAttachment {
            weight: QuantizerState::unset(self.weight),
            activation: quantize_output.then(|| QuantizerState::unset(self.activation)),
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    /// Square stride-1 convolution with padding `k / 2`.
    Conv { kernel: usize },
    Dense,
}

/// `linear -> [batch norm] -> [relu] -> [activation quantizer]`, with the
/// weight quantized before use.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: LinearKind,
    pub weight: Parameter,
    pub bias: Parameter,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
    pub quant: Option<QuantAttachment>,
}

impl Block {
    pub fn in_features(&self) -> usize {
        self.weight.master.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.master.shape()[0]
    }

    /// Active weight quantizer, if quantization is enabled.
    pub fn weight_quantizer(&self) -> Option<&QuantizerState> {
        self.quant.as_ref().filter(|q| q.enabled).map(|q| &q.weight)
    }

    pub fn activation_quantizer(&self) -> Option<&QuantizerState> {
        self.quant.as_ref().filter(|q| q.enabled).and_then(|q| q.activation.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Block(Block),
    MaxPool2,
    Upsample2,
    Concat,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Block(b) => match b.kind {
                LinearKind::Conv { kernel: 1 } => "conv1x1",
                LinearKind::Conv { .. } => "conv3x3",
                LinearKind::Dense => "dense",
            },
            Layer::MaxPool2 => "maxpool2",
            Layer::Upsample2 => "upsample2",
            Layer::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    /// `(C, H, W)` of one sample.
    pub input_shape: [usize; 3],
    pub nodes: Vec<LayerNode>,
    pub ste: SteMode,
}

impl ModelGraph {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self { input_shape, nodes: Vec::new(), ste: SteMode::Identity }
    }

    /// Appends a node and returns the value id of its output.
    pub fn push(&mut self, name: impl Into<String>, layer: Layer, inputs: Vec<usize>) -> usize {
        debug_assert!(inputs.iter().all(|&v| v <= self.nodes.len()));
        self.nodes.push(LayerNode { name: name.into(), layer, inputs });
        self.nodes.len()
    }

    pub fn output_value(&self) -> usize {
        self.nodes.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, &Block)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.layer {
            Layer::Block(b) => Some((i, b)),
            _ => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = (usize, &mut Block)> {
        self.nodes.iter_mut().enumerate().filter_map(|(i, n)| match &mut n.layer {
            Layer::Block(b) => Some((i, b)),
            _ => None,
        })
    }

    /// All trainable tensors in a fixed order: per block weight, bias,
    /// then batch-norm gamma and beta.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for (_, b) in self.blocks_mut() {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for (_, b) in self.blocks() {
            out.push(&b.weight);
            out.push(&b.bias);
            if let Some(bn) = &b.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    /// Every quantizer in a fixed order: per block weight, then activation.
    pub fn quantizers_mut(&mut self) -> Vec<&mut QuantizerState> {
        let mut out = Vec::new();
        for (_, b) in self.blocks_mut() {
            if let Some(q) = &mut b.quant {
                out.push(&mut q.weight);
                if let Some(a) = &mut q.activation {
                    out.push(a);
                }
            }
        }
        out
    }

    pub fn quantizers(&self) -> Vec<&QuantizerState> {
        let mut out = Vec::new();
        for (_, b) in self.blocks() {
            if let Some(q) = &b.quant {
                out.push(&q.weight);
                if let Some(a) = &q.activation {
                    out.push(a);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.master.len()).sum()
    }

    pub fn set_quant_enabled(&mut self, enabled: bool) {
        for (_, b) in self.blocks_mut() {
            if let Some(q) = &mut b.quant {
                q.enabled = enabled;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
        for q in self.quantizers_mut() {
            q.grad = 0.0;
        }
    }

    /// Checks wiring and propagates shapes for batch size 1. Returns the
    /// per-sample output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        let mut shapes: Vec<Vec<usize>> = vec![self.input_shape.to_vec()];
        for (i, node) in self.nodes.iter().enumerate() {
            let bad = |msg: String| Error::Shape(format!("layer {i} ({}): {msg}", node.name));
            if node.inputs.is_empty() || node.inputs.iter().any(|&v| v > i) {
                return Err(bad(format!("invalid inputs {:?}", node.inputs)));
            }
            let first = &shapes[node.inputs[0]];
            let shape = match &node.layer {
                Layer::Block(b) => match b.kind {
                    LinearKind::Conv { .. } => {
                        if first.len() != 3 || first[0] != b.in_features() {
                            return Err(bad(format!("conv expects {} channels, got {first:?}", b.in_features())));
                        }
                        vec![b.out_features(), first[1], first[2]]
                    }
                    LinearKind::Dense => {
                        let f: usize = first.iter().product();
                        if f != b.in_features() {
                            return Err(bad(format!("dense expects {} features, got {f}", b.in_features())));
                        }
                        vec![b.out_features()]
                    }
                },
                Layer::MaxPool2 => {
                    if first.len() != 3 || !first[1].is_multiple_of(2) || !first[2].is_multiple_of(2) {
                        return Err(bad(format!("cannot pool {first:?}")));
                    }
                    vec![first[0], first[1] / 2, first[2] / 2]
                }
                Layer::Upsample2 => {
                    if first.len() != 3 {
                        return Err(bad(format!("cannot upsample {first:?}")));
                    }
                    vec![first[0], first[1] * 2, first[2] * 2]
                }
                Layer::Concat => {
                    let mut c = 0;
                    for &v in &node.inputs {
                        let s = &shapes[v];
                        if s.len() != 3 || s[1..] != first[1..] {
                            return Err(bad(format!("cannot concat {first:?} with {s:?}")));
                        }
                        c += s[0];
                    }
                    vec![c, first[1], first[2]]
                }
            };
            shapes.push(shape);
        }
        Ok(shapes.pop().unwrap())
    }
}
