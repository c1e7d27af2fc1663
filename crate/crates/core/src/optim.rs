//! SGD with momentum and Adam, with per-epoch learning-rate schedules.
//! Learnable exponent biases share the optimizer and learning rate of the
//! weights (no weight decay on biases).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine annealing from the base rate to 0 over `total_epochs`.
    Cosine { total_epochs: usize },
    /// Multiply by `gamma` every `every` epochs.
    MultiStep { every: usize, gamma: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::MultiStep { every: 200, gamma: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if let Schedule::MultiStep { every: 0, .. } | Schedule::Cosine { total_epochs: 0 } = self.schedule {
            return Err(Error::Config("schedule interval must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine { total_epochs } => {
                let t = (epoch.min(total_epochs)) as f64 / total_epochs as f64;
                0.5 * self.lr * (1.0 + (PI * t).cos())
            }
            Schedule::MultiStep { every, gamma } => self.lr * gamma.powi((epoch / every) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub epoch: usize,
    /// Number of updates applied so far.
    pub step: u64,
    /// Momentum buffer (SGD) or first moment (Adam), one per slot.
    pub first: Vec<Vec<f64>>,
    /// Second moment (Adam only).
    pub second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, epoch: 0, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    fn ensure_slots(&mut self, sizes: &[usize]) -> Result<()> {
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.second = sizes.iter().map(|&n| vec![0.0; n]).collect();
        }
        let ok = self.first.len() == sizes.len() && self.first.iter().zip(sizes).all(|(s, &n)| s.len() == n);
        if !ok {
            return Err(Error::Shape("optimizer slots do not match model parameters".into()));
        }
        Ok(())
    }

    fn apply(&mut self, slot: usize, lr: f64, w: &mut [f64], g: &[f64], decay: f64) {
        let c = self.config;
        match c.algorithm {
            Algorithm::SgdMomentum => {
                let v = &mut self.first[slot];
                for i in 0..w.len() {
                    v[i] = c.momentum * v[i] + g[i] + decay * w[i];
                    w[i] -= lr * v[i];
                }
            }
            Algorithm::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                for i in 0..w.len() {
                    let gi = g[i] + decay * w[i];
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    w[i] -= lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
    }

    /// One update of every parameter master and every learnable, enabled
    /// exponent bias from the gradients stored in the model.
    pub fn update(&mut self, model: &mut ModelGraph) -> Result<()> {
        let mut sizes: Vec<usize> = model.params().iter().map(|p| p.master.len()).collect();
        sizes.extend(std::iter::repeat_n(1, model.quantizers().len()));
        self.ensure_slots(&sizes)?;
        self.step += 1;
        let lr = self.lr();
        let decay = self.config.weight_decay;
        let mut slot = 0;
        for p in model.params_mut() {
            let g = p.grad.data().to_vec();
            self.apply(slot, lr, p.master.data_mut(), &g, decay);
            slot += 1;
        }
        for (_, b) in model.blocks_mut() {
            let Some(att) = &mut b.quant else { continue };
            let enabled = att.enabled;
            let mut qs = vec![&mut att.weight];
            if let Some(a) = &mut att.activation {
                qs.push(a);
            }
            for q in qs {
                if enabled && q.learnable {
                    if let Some(e0) = &mut q.e0 {
                        let mut w = [*e0];
                        self.apply(slot, lr, &mut w, &[q.grad], 0.0);
                        if !w[0].is_finite() {
                            return Err(Error::Diverged(format!("exponent bias update produced {}", w[0])));
                        }
                        *e0 = w[0];
                    }
                }
                slot += 1;
            }
        }
        Ok(())
    }
}
