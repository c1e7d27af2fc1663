//! Quantization-aware training step and exponent-bias calibration.
//!
//! One step runs the three phases: a forward pass with quantized weights
//! and activations, a backward pass through straight-through quantizer
//! nodes, and an optimizer update of the full-precision masters and the
//! real-valued biases.

use crate::autograd::{backward, forward, Mode, Tape};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::loss::{cross_entropy_loss, jaccard_bce_loss};
use crate::optim::OptimState;
use crate::quant::{init_exponent_bias, BiasInit};
use crate::tensor::Tensor;

/// Supervision for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Binary masks shaped like the logits.
    Masks(Tensor),
    /// Class labels, one per row.
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

/// Loss value and gradient w.r.t. the logits.
pub fn task_loss(logits: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
    match targets {
        Targets::Masks(m) => jaccard_bce_loss(logits, m),
        Targets::Labels(l) => cross_entropy_loss(logits, l),
    }
}

fn diagnose(model: &ModelGraph, tape: &Tape, loss: f64) -> Error {
    for (i, node) in model.nodes.iter().enumerate() {
        if let Some(out) = tape.node_output(i) {
            if !out.all_finite() {
                return Error::Diverged(format!("loss {loss}; layer {i} ({}) output: {}", node.name, out.stats()));
            }
        }
    }
    let logits = tape.output().map(|t| t.stats()).unwrap_or_default();
    Error::Diverged(format!("loss {loss} with finite signals; logits: {logits}"))
}

/// Forward + backward + update. Returns the pre-update loss and the
/// (consumed) tape so callers can inspect recorded signals.
pub(crate) fn step_with_tape(model: &mut ModelGraph, batch: &Batch, optim: &mut OptimState) -> Result<(f64, Tape)> {
    model.zero_grad();
    let (logits, mut tape) = forward(model, &batch.inputs, Mode::Train)?;
    let (loss, grad) = task_loss(&logits, &batch.targets)?;
    if !loss.is_finite() {
        return Err(diagnose(model, &tape, loss));
    }
    backward(model, &mut tape, &grad)?;
    optim.update(model)?;
    for q in model.quantizers() {
        if let Some(e0) = q.e0 {
            if !e0.is_finite() {
                return Err(Error::Diverged(format!("exponent bias became {e0}")));
            }
        }
    }
    Ok((loss, tape))
}

/// One training iteration. With quantizers disabled this is a plain
/// full-precision step.
pub fn qat_step(model: &mut ModelGraph, batch: &Batch, optim: &mut OptimState) -> Result<f64> {
    step_with_tape(model, batch, optim).map(|(loss, _)| loss)
}

/// Maxima observed for one quantized block during calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEntry {
    pub node: usize,
    pub name: String,
    pub weight_max: f64,
    pub activation_max: Option<f64>,
    pub weight_e0: f64,
    pub activation_e0: Option<f64>,
}

fn initial_bias(max_abs: f64, fmt: crate::format::MinifloatFormat, init: BiasInit) -> Result<f64> {
    if max_abs > 0.0 {
        init_exponent_bias(max_abs, fmt, init)
    } else {
        // nothing observed (e.g. a dead ReLU): fall back to the IEEE bias
        Ok(fmt.ieee_bias() as f64)
    }
}

/// Trains for up to `n_iters` iterations with quantization bypassed while
/// tracking running `max|W|` per weight tensor and `max|X|` per activation
/// signal, then sets every exponent bias from those maxima and marks the
/// biases learnable.
pub fn warmup_calibrate<I>(
    model: &mut ModelGraph,
    data: I,
    n_iters: usize,
    optim: &mut OptimState,
    init: BiasInit,
) -> Result<Vec<CalibrationEntry>>
where
    I: IntoIterator<Item = Batch>,
{
    let enabled: Vec<bool> = model.blocks().map(|(_, b)| b.quant.as_ref().is_some_and(|q| q.enabled)).collect();
    let tracked: Vec<usize> = model.blocks().filter(|(_, b)| b.quant.is_some()).map(|(i, _)| i).collect();
    let mut w_max = vec![0.0f64; tracked.len()];
    let mut a_max = vec![0.0f64; tracked.len()];
    model.set_quant_enabled(false);

    let mut seen = 0usize;
    let result = (|| -> Result<()> {
        for batch in data.into_iter().take(n_iters) {
            for (k, &node) in tracked.iter().enumerate() {
                if let crate::graph::Layer::Block(b) = &model.nodes[node].layer {
                    w_max[k] = w_max[k].max(b.weight.master.max_abs());
                }
            }
            let (_, tape) = step_with_tape(model, &batch, optim)?;
            for (k, &node) in tracked.iter().enumerate() {
                if let Some(act) = tape.activation(node) {
                    a_max[k] = a_max[k].max(act.max_abs());
                }
            }
            seen += 1;
        }
        Ok(())
    })();

    for ((_, b), on) in model.blocks_mut().zip(&enabled) {
        if let Some(q) = &mut b.quant {
            q.enabled = *on;
        }
    }
    result?;
    if seen == 0 {
        return Err(Error::InvalidArgument("calibration data stream is empty".into()));
    }

    let mut report = Vec::with_capacity(tracked.len());
    for (k, &node) in tracked.iter().enumerate() {
        let name = model.nodes[node].name.clone();
        let crate::graph::Layer::Block(b) = &mut model.nodes[node].layer else { unreachable!() };
        let att = b.quant.as_mut().unwrap();
        let weight_e0 = initial_bias(w_max[k], att.weight.format, init)?;
        att.weight.e0 = Some(weight_e0);
        att.weight.learnable = true;
        let mut activation_e0 = None;
        if let Some(a) = &mut att.activation {
            let e0 = initial_bias(a_max[k], a.format, init)?;
            a.e0 = Some(e0);
            a.learnable = true;
            activation_e0 = Some(e0);
        }
        report.push(CalibrationEntry {
            node,
            name,
            weight_max: w_max[k],
            activation_max: att.activation.as_ref().map(|_| a_max[k]),
            weight_e0,
            activation_e0,
        });
    }
    Ok(report)
}

/// Sets every quantizer to a fixed integer bias (not learnable).
pub fn set_fixed_bias(model: &mut ModelGraph, bias: i32) {
    for q in model.quantizers_mut() {
        q.e0 = Some(bias as f64);
        q.learnable = false;
    }
}

/// Every quantizer bias, in [`ModelGraph::quantizers`] order.
pub fn bias_snapshot(model: &ModelGraph) -> Vec<Option<f64>> {
    model.quantizers().iter().map(|q| q.e0).collect()
}
