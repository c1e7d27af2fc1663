//! Forward recording and reverse-mode gradient propagation over a
//! [`ModelGraph`].
//!
//! The forward pass stores every node output plus whatever each layer
//! needs for its derivative. Backward walks the records in exact reverse
//! order, accumulating parameter gradients into [`Parameter::grad`] and
//! exponent-bias gradients into [`QuantizerState::grad`].
//!
//! [`Parameter::grad`]: crate::graph::Parameter::grad

use crate::error::{Error, Result};
use crate::graph::{Block, Layer, LinearKind, ModelGraph};
use crate::ops::{self, BnCache};
use crate::quant::{quantize_value, saturation_grad, QuantizerState, SteMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, tape recorded.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

#[derive(Debug)]
enum Saved {
    Block {
        /// Weight actually used (quantized image when quantization is on).
        weight: Tensor,
        bn: Option<BnCache>,
        /// Output of the nonlinearity before activation quantization.
        act: Option<Tensor>,
    },
    MaxPool { idx: Vec<usize>, in_shape: Vec<usize> },
    Upsample { in_shape: Vec<usize> },
    Concat { channels: Vec<usize> },
}

/// Record of one forward pass. Usable for exactly one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    saved: Vec<Saved>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.saved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saved.is_empty()
    }

    /// Output of node `i`.
    pub fn node_output(&self, i: usize) -> Option<&Tensor> {
        self.values.get(i + 1)
    }

    /// Pre-quantization activation of node `i`, when it has one.
    pub fn activation(&self, i: usize) -> Option<&Tensor> {
        match self.saved.get(i) {
            Some(Saved::Block { act, .. }) => act.as_ref(),
            _ => None,
        }
    }

    pub fn output(&self) -> Option<&Tensor> {
        if self.saved.is_empty() {
            None
        } else {
            self.values.last()
        }
    }
}

fn quantize_tensor(x: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    let range = q.range()?;
    let m = q.format.man_bits();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i, value: *v });
        }
        *v = quantize_value(*v, m, range);
    }
    Ok(out)
}

/// Runs one block. Returns the output and the state backward needs.
fn forward_block(block: &mut Block, x: &Tensor, mode: Mode) -> Result<(Tensor, Saved)> {
    let weight = match block.weight_quantizer() {
        Some(q) => quantize_tensor(&block.weight.master, q)?,
        None => block.weight.master.clone(),
    };
    let mut y = match block.kind {
        LinearKind::Conv { .. } => ops::conv2d(x, &weight, &block.bias.master)?,
        LinearKind::Dense => ops::dense(x, &weight, &block.bias.master)?,
    };
    let mut bn_cache = None;
    if let Some(bn) = &mut block.bn {
        let y4 = if y.shape().len() == 2 {
            let (n, f) = (y.shape()[0], y.shape()[1]);
            y.reshape(vec![n, f, 1, 1])?
        } else {
            y
        };
        let out = match mode {
            Mode::Train => {
                let (out, cache) = ops::batchnorm_train(&y4, bn.gamma.master.data(), bn.beta.master.data(), bn.eps)?;
                let (n, _, h, w) = y4.dims4()?;
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..cache.mean.len() {
                    bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * cache.mean[c];
                    bn.running_var[c] =
                        (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * cache.var[c] * unbias;
                }
                bn_cache = Some(cache);
                out
            }
            Mode::Eval => ops::batchnorm_eval(
                &y4,
                bn.gamma.master.data(),
                bn.beta.master.data(),
                &bn.running_mean,
                &bn.running_var,
                bn.eps,
            )?,
        };
        let shape = if block.kind == LinearKind::Dense {
            vec![out.shape()[0], out.shape()[1]]
        } else {
            out.shape().to_vec()
        };
        y = out.reshape(shape)?;
    }
    if block.relu {
        y = ops::relu(&y);
    }
    let (out, act) = match block.activation_quantizer() {
        Some(q) => (quantize_tensor(&y, q)?, Some(y)),
        None if block.relu => (y.clone(), Some(y)),
        None => (y, None),
    };
    Ok((out, Saved::Block { weight, bn: bn_cache, act }))
}

/// Executes node `index` on its inputs, appending its record to the tape.
pub fn forward_layer(model: &mut ModelGraph, index: usize, inputs: &[&Tensor], mode: Mode, tape: &mut Tape) -> Result<Tensor> {
    let node = model
        .nodes
        .get_mut(index)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {index}")))?;
    let first = *inputs.first().ok_or_else(|| Error::Shape(format!("layer {index} has no inputs")))?;
    let wrap = |e: Error| match e {
        Error::Shape(msg) => Error::Shape(format!("layer {index} ({}): {msg}", node.name)),
        other => other,
    };
    let (out, saved) = match &mut node.layer {
        Layer::Block(b) => forward_block(b, first, mode).map_err(wrap)?,
        Layer::MaxPool2 => {
            let (y, idx) = ops::maxpool2(first).map_err(wrap)?;
            (y, Saved::MaxPool { idx, in_shape: first.shape().to_vec() })
        }
        Layer::Upsample2 => (ops::upsample2(first).map_err(wrap)?, Saved::Upsample { in_shape: first.shape().to_vec() }),
        Layer::Concat => {
            let channels = inputs.iter().map(|t| t.shape().get(1).copied().unwrap_or(0)).collect();
            (ops::concat_channels(inputs).map_err(wrap)?, Saved::Concat { channels })
        }
    };
    tape.saved.push(saved);
    Ok(out)
}

/// Runs the whole graph on a batch `(N, C, H, W)`.
pub fn forward(model: &mut ModelGraph, input: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
    let [c, h, w] = model.input_shape;
    if input.shape().len() != 4 || input.shape()[1..] != [c, h, w] {
        return Err(Error::Shape(format!(
            "model expects (N, {c}, {h}, {w}) input, got {:?}",
            input.shape()
        )));
    }
    let mut tape = Tape::new();
    tape.values.push(input.clone());
    for i in 0..model.nodes.len() {
        let ids = model.nodes[i].inputs.clone();
        let values = std::mem::take(&mut tape.values);
        let ins: Vec<&Tensor> = ids.iter().map(|&v| &values[v]).collect();
        let out = forward_layer(model, i, &ins, mode, &mut tape);
        drop(ins);
        tape.values = values;
        tape.values.push(out.map_err(|e| annotate(e, i, &model.nodes[i].name))?);
    }
    let out = tape.values.last().unwrap().clone();
    Ok((out, tape))
}

fn annotate(e: Error, index: usize, name: &str) -> Error {
    match e {
        Error::NonFinite { index: el, value } => {
            Error::Diverged(format!("layer {index} ({name}) produced {value} at element {el}"))
        }
        other => other,
    }
}

/// Inference-mode forward without keeping a tape.
pub fn predict(model: &mut ModelGraph, input: &Tensor) -> Result<Tensor> {
    forward(model, input, Mode::Eval).map(|(y, _)| y)
}

fn backward_block(block: &mut Block, saved: &Saved, x: &Tensor, grad_out: Tensor, ste: SteMode) -> Result<Tensor> {
    let Saved::Block { weight, bn, act } = saved else {
        return Err(Error::Tape("record does not belong to a block".into()));
    };
    let mut g = grad_out;
    let enabled = block.quant.as_ref().is_some_and(|q| q.enabled);
    if let (true, Some(q)) = (enabled, block.quant.as_mut().and_then(|q| q.activation.as_mut())) {
        let act = act.as_ref().ok_or_else(|| Error::Tape("missing activation".into()))?;
        q.grad += saturation_grad(g.data_mut(), act.data(), q.range()?, ste);
    }
    if block.relu {
        let act = act.as_ref().ok_or_else(|| Error::Tape("missing activation".into()))?;
        g = ops::relu_backward(&g, act);
    }
    if let Some(bn_layer) = &mut block.bn {
        let cache = bn.as_ref().ok_or_else(|| Error::Tape("batch norm was run in eval mode".into()))?;
        let shape = g.shape().to_vec();
        let g4 = if shape.len() == 2 { g.reshape(vec![shape[0], shape[1], 1, 1])? } else { g };
        let (gx, gg, gb) = ops::batchnorm_backward(&g4, cache, bn_layer.gamma.master.data())?;
        for (a, b) in bn_layer.gamma.grad.data_mut().iter_mut().zip(&gg) {
            *a += b;
        }
        for (a, b) in bn_layer.beta.grad.data_mut().iter_mut().zip(&gb) {
            *a += b;
        }
        g = gx.reshape(shape)?;
    }
    let (gx, mut gw, gb) = match block.kind {
        LinearKind::Conv { .. } => {
            let r = ops::conv2d_backward(x, weight, &g)?;
            (r.input, r.weight, r.bias)
        }
        LinearKind::Dense => {
            let r = ops::dense_backward(x, weight, &g)?;
            (r.input, r.weight, r.bias)
        }
    };
    if let (true, Some(q)) = (enabled, block.quant.as_mut()) {
        let range = q.weight.range()?;
        q.weight.grad += saturation_grad(gw.data_mut(), block.weight.master.data(), range, ste);
    }
    block.weight.grad.add_assign(&gw)?;
    block.bias.grad.add_assign(&gb)?;
    Ok(gx)
}

/// Propagates `loss_grad` (gradient w.r.t. the model output) back through
/// the recorded pass. Gradients are accumulated, so callers zero them first.
/// Returns the gradient with respect to the model input.
pub fn backward(model: &mut ModelGraph, tape: &mut Tape, loss_grad: &Tensor) -> Result<Tensor> {
    if tape.consumed {
        return Err(Error::Tape("tape was already used for a backward pass".into()));
    }
    if tape.saved.is_empty() {
        return Err(Error::Tape("no forward pass recorded".into()));
    }
    if tape.saved.len() != model.nodes.len() {
        return Err(Error::Tape("tape was recorded on a different model".into()));
    }
    let out = tape.values.last().unwrap();
    if out.shape() != loss_grad.shape() {
        return Err(Error::Shape(format!(
            "loss gradient {:?} does not match output {:?}",
            loss_grad.shape(),
            out.shape()
        )));
    }
    tape.consumed = true;
    let ste = model.ste;
    let mut grads: Vec<Option<Tensor>> = vec![None; tape.values.len()];
    grads[tape.values.len() - 1] = Some(loss_grad.clone());
    for i in (0..model.nodes.len()).rev() {
        let Some(g) = grads[i + 1].take() else { continue };
        let node = &mut model.nodes[i];
        let saved = &tape.saved[i];
        let input_grads: Vec<Tensor> = match (&mut node.layer, saved) {
            (Layer::Block(b), s) => vec![backward_block(b, s, &tape.values[node.inputs[0]], g, ste)?],
            (Layer::MaxPool2, Saved::MaxPool { idx, in_shape }) => vec![ops::maxpool2_backward(&g, idx, in_shape)],
            (Layer::Upsample2, Saved::Upsample { in_shape }) => vec![ops::upsample2_backward(&g, in_shape)?],
            (Layer::Concat, Saved::Concat { channels }) => ops::concat_channels_backward(&g, channels)?,
            _ => return Err(Error::Tape(format!("record {i} does not match its layer"))),
        };
        for (&v, gi) in node.inputs.iter().zip(input_grads) {
            match &mut grads[v] {
                Some(acc) => acc.add_assign(&gi)?,
                slot @ None => *slot = Some(gi),
            }
        }
    }
    Ok(grads[0].take().unwrap_or_else(|| Tensor::zeros(tape.values[0].shape())))
}
