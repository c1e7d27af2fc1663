#![allow(dead_code)]

use minifloat_qat::autograd::{backward, forward, Mode};
use minifloat_qat::format::{MinifloatFormat, QuantRange, ZeroEncoding};
use minifloat_qat::graph::{BatchNorm, Block, Layer, LinearKind, ModelGraph, Parameter};
use minifloat_qat::loss::{cross_entropy_loss, jaccard_bce_loss};
use minifloat_qat::quant::{quantize_backward, quantize_relaxed, SteMode};
use minifloat_qat::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Absolute slack for gradients that are zero up to rounding.
pub const ABS_FLOOR: f64 = 1e-8;
/// Coordinates checked per tensor.
pub const COORDS: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + ABS_FLOOR
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Scalar probe loss `sum(r * model(x))` in training mode.
fn probe(model: &mut ModelGraph, x: &Tensor, r: &Tensor) -> f64 {
    let (y, _) = forward(model, x, Mode::Train).unwrap();
    dot(&y, r)
}

/// Worst mismatch found while checking a model; `None` when all coordinates
/// agree.
#[derive(Debug)]
pub struct Mismatch {
    pub what: String,
    pub analytic: f64,
    pub numeric: f64,
}

fn coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= COORDS {
        (0..n).collect()
    } else {
        sample(rng, n, COORDS).into_vec()
    }
}

/// Compares backward against central differences for the input and every
/// parameter tensor of `model`.
pub fn check_model(model: &mut ModelGraph, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<usize, Mismatch> {
    let (y, mut tape) = forward(model, x, Mode::Train).unwrap();
    let r = randn(rng, y.shape(), 1.0);
    model.zero_grad();
    let gx = backward(model, &mut tape, &r).unwrap();
    let grads: Vec<Tensor> = model.params().iter().map(|p| p.grad.clone()).collect();
    let mut checked = 0;

    let mut xp = x.clone();
    for i in coords(rng, x.len()) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let up = probe(model, &xp, &r);
        xp.data_mut()[i] = orig - FD_STEP;
        let down = probe(model, &xp, &r);
        xp.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !close(gx.data()[i], numeric) {
            return Err(Mismatch { what: format!("input[{i}]"), analytic: gx.data()[i], numeric });
        }
        checked += 1;
    }
    for (k, g) in grads.iter().enumerate() {
        for i in coords(rng, g.len()) {
            let orig = model.params()[k].master.data()[i];
            model.params_mut()[k].master.data_mut()[i] = orig + FD_STEP;
            let up = probe(model, x, &r);
            model.params_mut()[k].master.data_mut()[i] = orig - FD_STEP;
            let down = probe(model, x, &r);
            model.params_mut()[k].master.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if !close(g.data()[i], numeric) {
                return Err(Mismatch { what: format!("param {k}[{i}]"), analytic: g.data()[i], numeric });
            }
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn block(rng: &mut ChaCha8Rng, kind: LinearKind, cin: usize, cout: usize, bn: bool, relu: bool) -> Block {
    let shape = match kind {
        LinearKind::Conv { kernel } => vec![cout, cin, kernel, kernel],
        LinearKind::Dense => vec![cout, cin],
    };
    let mut norm = bn.then(|| BatchNorm::new(cout));
    if let Some(b) = &mut norm {
        b.gamma.master = randn(rng, &[cout], 1.0);
        b.beta.master = randn(rng, &[cout], 1.0);
    }
    Block {
        kind,
        weight: Parameter::new(randn(rng, &shape, 0.7)),
        bias: Parameter::new(randn(rng, &[cout], 0.5)),
        bn: norm,
        relu,
        quant: None,
    }
}

pub const LAYER_KINDS: [&str; 7] = ["conv3x3", "conv1x1", "dense", "conv-bn-relu", "maxpool", "upsample", "concat"];

/// Random small graph exercising layer `kind`, plus a matching input.
pub fn layer_case(kind: &str, rng: &mut ChaCha8Rng) -> (ModelGraph, Tensor) {
    let n = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=3);
    let h = 2 * rng.gen_range(1..=3);
    let w = 2 * rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let mut m = ModelGraph::new([c, h, w]);
    let conv3 = LinearKind::Conv { kernel: 3 };
    match kind {
        "conv3x3" => {
            m.push("conv", Layer::Block(block(rng, conv3, c, cout, false, false)), vec![0]);
        }
        "conv1x1" => {
            m.push("conv", Layer::Block(block(rng, LinearKind::Conv { kernel: 1 }, c, cout, false, false)), vec![0]);
        }
        "dense" => {
            m.push("fc", Layer::Block(block(rng, LinearKind::Dense, c * h * w, cout, false, false)), vec![0]);
        }
        "conv-bn-relu" => {
            // batch statistics need more than one element per channel
            m.push("conv", Layer::Block(block(rng, conv3, c, cout, true, true)), vec![0]);
        }
        "maxpool" => {
            let v = m.push("conv", Layer::Block(block(rng, conv3, c, cout, false, false)), vec![0]);
            m.push("pool", Layer::MaxPool2, vec![v]);
        }
        "upsample" => {
            let v = m.push("conv", Layer::Block(block(rng, conv3, c, cout, false, false)), vec![0]);
            m.push("up", Layer::Upsample2, vec![v]);
        }
        "concat" => {
            let v = m.push("conv", Layer::Block(block(rng, conv3, c, cout, false, true)), vec![0]);
            let cat = m.push("cat", Layer::Concat, vec![0, v]);
            m.push("mix", Layer::Block(block(rng, LinearKind::Conv { kernel: 1 }, c + cout, 2, false, false)), vec![cat]);
        }
        other => panic!("unknown layer kind {other}"),
    }
    let x = randn(rng, &[n, c, h, w], 1.0);
    (m, x)
}

/// Checks the segmentation loss gradient on a random instance.
pub fn check_jaccard_bce(rng: &mut ChaCha8Rng) -> Result<usize, Mismatch> {
    let shape = [rng.gen_range(1..=3), 1, rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let mut z = randn(rng, &shape, 3.0);
    let t = {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap()
    };
    let (_, g) = jaccard_bce_loss(&z, &t).unwrap();
    for i in 0..z.len() {
        let orig = z.data()[i];
        z.data_mut()[i] = orig + FD_STEP;
        let up = jaccard_bce_loss(&z, &t).unwrap().0;
        z.data_mut()[i] = orig - FD_STEP;
        let down = jaccard_bce_loss(&z, &t).unwrap().0;
        z.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !close(g.data()[i], numeric) {
            return Err(Mismatch { what: format!("jaccard-bce[{i}]"), analytic: g.data()[i], numeric });
        }
    }
    Ok(z.len())
}

pub fn check_cross_entropy(rng: &mut ChaCha8Rng) -> Result<usize, Mismatch> {
    let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
    let mut z = randn(rng, &[n, k], 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let (_, g) = cross_entropy_loss(&z, &labels).unwrap();
    for i in 0..z.len() {
        let orig = z.data()[i];
        z.data_mut()[i] = orig + FD_STEP;
        let up = cross_entropy_loss(&z, &labels).unwrap().0;
        z.data_mut()[i] = orig - FD_STEP;
        let down = cross_entropy_loss(&z, &labels).unwrap().0;
        z.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !close(g.data()[i], numeric) {
            return Err(Mismatch { what: format!("cross-entropy[{i}]"), analytic: g.data()[i], numeric });
        }
    }
    Ok(z.len())
}

/// Result of one bias-gradient trial: analytic value, independently
/// recomputed rule value, and the surrogate's central difference.
pub struct BiasGradTrial {
    pub analytic: f64,
    pub rule: f64,
    pub numeric: f64,
}

/// Random batch with some saturated elements, kept away from every
/// discontinuity of the relaxed surrogate within `±h` of an integer `e0`.
pub fn bias_grad_trial(rng: &mut ChaCha8Rng) -> BiasGradTrial {
    let e = rng.gen_range(1..=4);
    let m = rng.gen_range(1..=3);
    let zero = if rng.gen_bool(0.5) { ZeroEncoding::Point } else { ZeroEncoding::Binade };
    let fmt = MinifloatFormat::new(e, m, zero).unwrap();
    let e0 = rng.gen_range(-2..=4) as f64;
    let range = QuantRange::new(fmt, e0 as i32).unwrap();
    let n = rng.gen_range(2..=12);
    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (lo, hi) = (2.0 * range.x_min, 0.9 * range.x_max);
        let mag = if i == 0 || lo >= hi || rng.gen_bool(0.4) {
            range.x_max * rng.gen_range(1.05..3.0)
        } else {
            rng.gen_range(lo..hi)
        };
        x.push(sign * mag);
    }
    let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, analytic) = quantize_backward(&g, &x, fmt, e0, SteMode::Identity).unwrap();
    let rule: f64 = x
        .iter()
        .zip(&g)
        .filter(|(v, _)| v.abs() > range.x_max)
        .map(|(v, gi)| gi * (-std::f64::consts::LN_2 * range.x_max) * v.signum())
        .sum();
    let h = 1e-6;
    let f = |b: f64| -> f64 { quantize_relaxed(&x, fmt, b).unwrap().iter().zip(&g).map(|(q, gi)| q * gi).sum() };
    let numeric = (f(e0 + h) - f(e0 - h)) / (2.0 * h);
    BiasGradTrial { analytic, rule, numeric }
}

/// Small synthetic segmentation run that finishes in well under a second.
pub fn tiny_config(seed: u64) -> minifloat_qat::config::RunConfig {
    use minifloat_qat::config::RunConfig;
    use minifloat_qat::models::ModelSpec;
    let mut cfg = RunConfig {
        seed,
        epochs: 2,
        batch_size: 4,
        warmup_iters: 4,
        model: ModelSpec::ToySeg { in_channels: 3, size: 16, c1: 4, c2: 8 },
        ..RunConfig::default()
    };
    cfg.data.train_samples = 12;
    cfg.data.test_samples = 6;
    cfg.data.synthetic.size = 16;
    cfg.data.synthetic.min_extent = 3.0;
    cfg.data.synthetic.max_extent = 8.0;
    cfg
}
