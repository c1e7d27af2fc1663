mod common;

use common::*;
use minifloat_qat::autograd::{backward, forward, Mode};
use minifloat_qat::format::MinifloatFormat;
use minifloat_qat::graph::{LinearKind, ModelGraph, QuantAttachment};
use minifloat_qat::optim::{OptimConfig, OptimState};
use minifloat_qat::qat::{bias_snapshot, qat_step, warmup_calibrate, Batch};
use minifloat_qat::quant::{quantize, quantize_backward, BiasInit, QuantizerState, SteMode};
use minifloat_qat::train::{load_datasets, Dataset, Session};
use minifloat_qat::Tensor;

fn e3m2() -> MinifloatFormat {
    "E3M2".parse().unwrap()
}

fn first_batch(cfg: &minifloat_qat::config::RunConfig, data: &Dataset, n: usize) -> Batch {
    data.batch(&(0..n).collect::<Vec<_>>(), cfg, None).unwrap()
}

fn quantized_model(cfg: &minifloat_qat::config::RunConfig) -> ModelGraph {
    let mut s = Session::new(cfg.clone()).unwrap();
    let (train, _) = load_datasets(cfg).unwrap();
    s.model.set_quant_enabled(true);
    s.calibrate(&train).unwrap();
    s.model
}

#[test]
fn in_range_gradient_passes_straight_through() {
    let mut r = rng(7);
    let fmt = e3m2();
    let w = block(&mut r, LinearKind::Dense, 6, 3, false, false);
    let x = randn(&mut r, &[4, 6], 1.0);
    let gy = randn(&mut r, &[4, 3], 1.0);

    // bias 0 puts every weight (|w| < 0.7) inside [x_min, x_max] or at zero
    let mut quant = ModelGraph::new([6, 1, 1]);
    let mut qb = w.clone();
    qb.quant = Some(QuantAttachment { weight: QuantizerState::learned(fmt, 0.0), activation: None, enabled: true });
    quant.push("fc", minifloat_qat::graph::Layer::Block(qb), vec![0]);

    let mut plain = ModelGraph::new([6, 1, 1]);
    let mut pb = w.clone();
    pb.weight.master = Tensor::new(pb.weight.master.shape().to_vec(), quantize(w.weight.master.data(), fmt, 0.0).unwrap()).unwrap();
    plain.push("fc", minifloat_qat::graph::Layer::Block(pb), vec![0]);

    let x4 = x.reshape(vec![4, 6, 1, 1]).unwrap();
    let (yq, mut tq) = forward(&mut quant, &x4, Mode::Train).unwrap();
    let (yp, mut tp) = forward(&mut plain, &x4, Mode::Train).unwrap();
    assert_eq!(yq, yp);
    let gxq = backward(&mut quant, &mut tq, &gy).unwrap();
    let gxp = backward(&mut plain, &mut tp, &gy).unwrap();
    assert_eq!(gxq, gxp);
    assert_eq!(quant.params()[0].grad, plain.params()[0].grad);
    assert_eq!(quant.quantizers()[0].grad, 0.0);
}

#[test]
fn ste_modes_on_saturated_elements() {
    let fmt = e3m2();
    let x = [0.5, -3.0, 40.0, -100.0];
    let g = [1.0, 2.0, 3.0, 4.0];
    let (id, _) = quantize_backward(&g, &x, fmt, 3.0, SteMode::Identity).unwrap();
    assert_eq!(id, g.to_vec());
    let (clip, _) = quantize_backward(&g, &x, fmt, 3.0, SteMode::ClipZero).unwrap();
    assert_eq!(clip, vec![1.0, 2.0, 0.0, 0.0]);
}

#[test]
fn masters_stay_full_precision() {
    let cfg = tiny_config(1);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut model = quantized_model(&cfg);
    let batch = first_batch(&cfg, &train, 4);
    let before: Vec<Tensor> = model.params().iter().map(|p| p.master.clone()).collect();
    forward(&mut model, &batch.inputs, Mode::Train).unwrap();
    let after: Vec<Tensor> = model.params().iter().map(|p| p.master.clone()).collect();
    assert_eq!(before, after, "forward must not touch masters");

    let mut optim = OptimState::new(OptimConfig { lr: 1e-4, ..OptimConfig::default() });
    for _ in 0..3 {
        qat_step(&mut model, &batch, &mut optim).unwrap();
    }
    let fmt = e3m2();
    let mut off_grid = 0usize;
    for (_, b) in model.blocks() {
        let bias = b.weight_quantizer().unwrap().e0.unwrap();
        let q = quantize(b.weight.master.data(), fmt, bias).unwrap();
        off_grid += b.weight.master.data().iter().zip(&q).filter(|(a, b)| a != b).count();
    }
    assert!(off_grid > 0);
    // small steps must accumulate in the masters, not be rounded away
    let moved = before.iter().zip(model.params()).filter(|(b, p)| **b != p.master).count();
    assert_eq!(moved, before.len());
}

#[test]
fn disabled_quantizers_match_an_unquantized_model() {
    let cfg = tiny_config(2);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut with = cfg.model.build(Some(cfg.quant.template().unwrap()), cfg.seed).unwrap();
    with.set_quant_enabled(false);
    let mut without = cfg.model.build(None, cfg.seed).unwrap();
    let mut oa = OptimState::new(cfg.optim);
    let mut ob = OptimState::new(cfg.optim);
    for step in 0..3 {
        let batch = first_batch(&cfg, &train, 4 + step);
        let la = qat_step(&mut with, &batch, &mut oa).unwrap();
        let lb = qat_step(&mut without, &batch, &mut ob).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }
    let pa: Vec<&Tensor> = with.params().iter().map(|p| &p.master).collect();
    let pb: Vec<&Tensor> = without.params().iter().map(|p| &p.master).collect();
    assert_eq!(pa, pb);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = tiny_config(3);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut model = quantized_model(&cfg);
    let batch = first_batch(&cfg, &train, 4);
    let params: Vec<Tensor> = model.params().iter().map(|p| p.master.clone()).collect();
    let biases = bias_snapshot(&model);
    let mut optim = OptimState::new(OptimConfig { lr: 0.0, ..OptimConfig::default() });
    qat_step(&mut model, &batch, &mut optim).unwrap();
    assert!(model.quantizers().iter().any(|q| q.grad != 0.0) || model.params().iter().any(|p| p.grad.max_abs() > 0.0));
    let after: Vec<Tensor> = model.params().iter().map(|p| p.master.clone()).collect();
    assert_eq!(params, after);
    assert_eq!(biases, bias_snapshot(&model));
}

#[test]
fn loss_falls_in_every_window() {
    let cfg = tiny_config(4);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut model = quantized_model(&cfg);
    let batch = first_batch(&cfg, &train, 8);
    let mut optim = OptimState::new(OptimConfig { lr: 1e-3, ..OptimConfig::default() });
    let losses: Vec<f64> = (0..200).map(|_| qat_step(&mut model, &batch, &mut optim).unwrap()).collect();
    let means: Vec<f64> = losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for (k, w) in losses.chunks(50).enumerate() {
        assert!(w[w.len() - 1] < w[0], "window {k}: {} -> {}", w[0], w[w.len() - 1]);
    }
    assert!(means.windows(2).all(|p| p[1] < p[0]), "{means:?}");
}

#[test]
fn warmup_tracks_true_maxima() {
    let cfg = tiny_config(5);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut model = cfg.model.build(Some(cfg.quant.template().unwrap()), cfg.seed).unwrap();
    let batches: Vec<Batch> = (0..3).map(|k| train.batch(&[k, k + 3, k + 6], &cfg, None).unwrap()).collect();

    let mut reference = model.clone();
    reference.set_quant_enabled(false);
    let mut expect_act = vec![0.0f64; reference.nodes.len()];
    for b in &batches {
        let (_, tape) = forward(&mut reference, &b.inputs, Mode::Train).unwrap();
        for (i, slot) in expect_act.iter_mut().enumerate() {
            if let Some(a) = tape.activation(i) {
                *slot = slot.max(a.max_abs());
            }
        }
    }

    let mut optim = OptimState::new(OptimConfig { lr: 0.0, ..OptimConfig::default() });
    let report = warmup_calibrate(&mut model, batches.clone(), 3, &mut optim, BiasInit::Headroom).unwrap();
    for e in &report {
        let minifloat_qat::graph::Layer::Block(b) = &reference.nodes[e.node].layer else { panic!() };
        assert_eq!(e.weight_max, b.weight.master.max_abs(), "{}", e.name);
        if let Some(a) = e.activation_max {
            assert_eq!(a, expect_act[e.node], "{}", e.name);
        }
    }
    assert!(model.quantizers().iter().all(|q| q.learnable && q.e0.is_some()));

    let mut again = cfg.model.build(Some(cfg.quant.template().unwrap()), cfg.seed).unwrap();
    let mut optim = OptimState::new(OptimConfig { lr: 0.0, ..OptimConfig::default() });
    let second = warmup_calibrate(&mut again, batches, 3, &mut optim, BiasInit::Headroom).unwrap();
    assert_eq!(report, second);
}

#[test]
fn warmup_rejects_an_empty_stream() {
    let cfg = tiny_config(5);
    let mut model = cfg.model.build(Some(cfg.quant.template().unwrap()), cfg.seed).unwrap();
    let mut optim = OptimState::new(cfg.optim);
    assert!(warmup_calibrate(&mut model, Vec::<Batch>::new(), 3, &mut optim, BiasInit::Headroom).is_err());
}

fn full_run(cfg: &minifloat_qat::config::RunConfig) -> Session {
    let (train, test) = load_datasets(cfg).unwrap();
    let mut s = Session::new(cfg.clone()).unwrap();
    s.run(&train, &test, |_, _| Ok(())).unwrap();
    let (mut s, _) = s.start_qat(cfg.clone(), &train).unwrap();
    s.run(&train, &test, |_, _| Ok(())).unwrap();
    s
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny_config(6);
    let a = full_run(&cfg);
    let b = full_run(&cfg);
    // full-precision records carry NaN for unset biases, so compare renderings
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(a.history.len(), 4);
    let c = full_run(&tiny_config(7));
    assert_ne!(format!("{:?}", a.history), format!("{:?}", c.history));
}
