//! Epoch driver for full-precision training and quantization-aware
//! fine-tuning, evaluation, and per-epoch metrics records.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::predict;
use crate::config::{BiasMode, RunConfig, Task};
use crate::data::{
    augment, classification_batch, gen_synthetic_classification, gen_synthetic_range, keyed_rng,
    load_image_mask_dir, segmentation_batch, ClassificationSample, SegmentationSample,
};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::loss::{mean_iou, threshold_logits, top1_accuracy};
use crate::optim::OptimState;
use crate::qat::{qat_step, set_fixed_bias, warmup_calibrate, Batch, CalibrationEntry};

const SHUFFLE_DOMAIN: u64 = 10;
const WARMUP_DOMAIN: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Full-precision training with quantizers bypassed.
    FullPrecision,
    /// Quantized forward, learned or fixed biases.
    Qat,
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    /// Mean IoU (segmentation) or top-1 accuracy (classification).
    pub metric: f64,
    pub lr: f64,
    /// Every quantizer bias; NaN stands for an unset bias.
    pub e0: Vec<f64>,
}

impl EpochRecord {
    /// `key=value` pairs separated by spaces.
    pub fn to_line(&self) -> String {
        let phase = match self.phase {
            Phase::FullPrecision => "fp",
            Phase::Qat => "qat",
        };
        let e0: Vec<String> = self.e0.iter().map(|v| v.to_string()).collect();
        format!(
            "phase={phase} epoch={} loss={} metric={} lr={} e0={}",
            self.epoch,
            self.loss,
            self.metric,
            self.lr,
            e0.join(",")
        )
    }
}

pub enum Dataset {
    Segmentation(Vec<SegmentationSample>),
    Classification(Vec<ClassificationSample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Segmentation(s) => s.len(),
            Dataset::Classification(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch of the given sample indices, augmented for `epoch` when
    /// `augment_epoch` is set.
    pub fn batch(&self, idx: &[usize], cfg: &RunConfig, augment_epoch: Option<u64>) -> Result<Batch> {
        match self {
            Dataset::Segmentation(s) => match augment_epoch {
                Some(epoch) if cfg.augment.enabled => {
                    let owned: Vec<SegmentationSample> =
                        idx.iter().map(|&i| augment(&s[i], &cfg.augment, cfg.seed, i as u64, epoch)).collect();
                    segmentation_batch(&owned.iter().collect::<Vec<_>>())
                }
                _ => segmentation_batch(&idx.iter().map(|&i| &s[i]).collect::<Vec<_>>()),
            },
            Dataset::Classification(s) => classification_batch(&idx.iter().map(|&i| &s[i]).collect::<Vec<_>>()),
        }
    }
}

/// Train and test sets described by the configuration.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match cfg.task {
        Task::SyntheticSeg => Ok((
            Dataset::Segmentation(gen_synthetic_range(&d.synthetic, 0, d.train_samples)?),
            Dataset::Segmentation(gen_synthetic_range(&d.synthetic, d.train_samples as u64, d.test_samples)?),
        )),
        Task::DirSeg => {
            let load = |p: &Path| -> Result<Vec<SegmentationSample>> { load_image_mask_dir(p)?.collect() };
            let train_dir = d.train_dir.as_deref().ok_or_else(|| Error::Config("data.train_dir is not set".into()))?;
            let train = load(train_dir)?;
            let test = match &d.test_dir {
                Some(p) => load(p)?,
                None => Vec::new(),
            };
            if train.is_empty() {
                return Err(Error::Config(format!("no image/mask pairs in {}", train_dir.display())));
            }
            Ok((Dataset::Segmentation(train), Dataset::Segmentation(test)))
        }
        Task::SanityClassify => {
            let size = cfg.model.input_shape()[1];
            let all = gen_synthetic_classification(size, d.classes, d.train_samples + d.test_samples, d.classify_seed)?;
            let (train, test) = all.split_at(d.train_samples);
            Ok((Dataset::Classification(train.to_vec()), Dataset::Classification(test.to_vec())))
        }
    }
}

/// Mean IoU or top-1 accuracy over the whole set, in inference mode.
/// Returns NaN for an empty set.
pub fn evaluate(model: &mut ModelGraph, data: &Dataset, cfg: &RunConfig) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let batch = data.batch(chunk, cfg, None)?;
        let logits = predict(model, &batch.inputs)?;
        let score = match &batch.targets {
            crate::qat::Targets::Masks(m) => mean_iou(&threshold_logits(&logits), m)?,
            crate::qat::Targets::Labels(l) => top1_accuracy(&logits, l)?,
        };
        total += score * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Complete training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub config: RunConfig,
    pub phase: Phase,
    pub model: ModelGraph,
    pub optim: OptimState,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Session {
    /// Fresh full-precision session. Quantizers are attached but disabled so
    /// the result can later be fine-tuned.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model = config.model.build(Some(config.quant.template()?), config.seed)?;
        model.ste = config.ste();
        model.set_quant_enabled(false);
        let optim = OptimState::new(config.optim);
        Ok(Self { config, phase: Phase::FullPrecision, model, optim, epoch: 0, history: Vec::new() })
    }

    /// Starts quantization-aware fine-tuning from a trained session: enables
    /// quantizers, runs `warmup_iters` iterations of calibration, then sets
    /// biases per the configured mode. `config` replaces the session's run
    /// settings; the model architecture must match.
    pub fn start_qat(mut self, config: RunConfig, data: &Dataset) -> Result<(Self, Vec<CalibrationEntry>)> {
        config.validate()?;
        if config.model != self.config.model {
            return Err(Error::Config(format!(
                "checkpoint model {} differs from configured {}",
                self.config.model, config.model
            )));
        }
        let template = config.quant.template()?;
        for (_, b) in self.model.blocks_mut() {
            if let Some(q) = &mut b.quant {
                q.weight = crate::quant::QuantizerState::unset(template.weight);
                if let Some(a) = &mut q.activation {
                    *a = crate::quant::QuantizerState::unset(template.activation);
                }
                q.enabled = true;
            }
        }
        self.model.ste = config.ste();
        self.config = config;
        self.phase = Phase::Qat;
        self.epoch = 0;
        self.optim = OptimState::new(self.config.optim);
        let report = self.calibrate(data)?;
        Ok((self, report))
    }

    /// Warm-up calibration on a deterministic batch stream.
    pub fn calibrate(&mut self, data: &Dataset) -> Result<Vec<CalibrationEntry>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("calibration data stream is empty".into()));
        }
        let cfg = self.config.clone();
        let iters = cfg.warmup_iters.max(1);
        let mut order: Vec<usize> = Vec::new();
        let mut round = 0u64;
        let mut batches = Vec::with_capacity(iters);
        while batches.len() < iters {
            if order.len() < cfg.batch_size {
                let mut fresh: Vec<usize> = (0..data.len()).collect();
                fresh.shuffle(&mut keyed_rng(&[WARMUP_DOMAIN, cfg.seed, round]));
                round += 1;
                order.extend(fresh);
            }
            let take = cfg.batch_size.min(order.len());
            batches.push(order.drain(..take).collect::<Vec<usize>>());
        }
        let stream = batches.into_iter().map(|idx| data.batch(&idx, &cfg, None));
        let mut failure = None;
        let ok_stream = stream.map_while(|b| match b {
            Ok(b) => Some(b),
            Err(e) => {
                failure = Some(e);
                None
            }
        });
        let report = warmup_calibrate(&mut self.model, ok_stream, iters, &mut self.optim, cfg.quant.init);
        if let Some(e) = failure {
            return Err(e);
        }
        let report = report?;
        if cfg.quant.bias_mode == BiasMode::Fixed {
            let bias = cfg.quant.fixed_bias.unwrap_or(cfg.quant.weight_format()?.ieee_bias());
            set_fixed_bias(&mut self.model, bias);
        }
        // warm-up steps belong to calibration, not to the fine-tuning schedule
        self.optim = OptimState::new(cfg.optim);
        Ok(report)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs one epoch and evaluates on `test`.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochRecord> {
        let cfg = &self.config;
        let epoch = self.epoch;
        self.optim.epoch = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let phase_key = self.phase as u64;
        order.shuffle(&mut keyed_rng(&[SHUFFLE_DOMAIN, cfg.seed, phase_key, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk, cfg, Some(epoch as u64 + 1000 * phase_key))?;
            let loss = qat_step(&mut self.model, &batch, &mut self.optim)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}: {e}")))?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let lr = self.optim.lr();
        let metric = evaluate(&mut self.model, test, &self.config)?;
        let record = EpochRecord {
            phase: self.phase,
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            metric,
            lr,
            e0: self.model.quantizers().iter().map(|q| q.e0.unwrap_or(f64::NAN)).collect(),
        };
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run<F>(&mut self, train: &Dataset, test: &Dataset, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Session, &EpochRecord) -> Result<()>,
    {
        while !self.is_finished() {
            let record = self.run_epoch(train, test)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    /// Per-quantizer table for reports.
    pub fn bias_table(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.model.blocks() {
            let Some(q) = &b.quant else { continue };
            let name = &self.model.nodes[i].name;
            let show = |s: &crate::quant::QuantizerState| match s.e0 {
                Some(e0) => format!("{} E0={e0} E_B={}", s.format, e0.ceil()),
                None => format!("{} unset", s.format),
            };
            let _ = write!(out, "{name}: weight {}", show(&q.weight));
            if let Some(a) = &q.activation {
                let _ = write!(out, ", activation {}", show(a));
            }
            out.push('\n');
        }
        out
    }
}
