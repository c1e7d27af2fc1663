//! Run configuration: one TOML file with bracketed sections, explicit
//! defaults for every key, and unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SyntheticShipConfig};
use crate::error::{Error, Result};
use crate::format::{MinifloatFormat, ZeroEncoding};
use crate::graph::QuantTemplate;
use crate::models::ModelSpec;
use crate::optim::OptimConfig;
use crate::quant::{BiasInit, SteMode};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "MFQAT_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    SyntheticSeg,
    DirSeg,
    SanityClassify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    Fixed,
    #[default]
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    /// Weight format, e.g. `E3M2` or `E3M2:zb`.
    pub weights: String,
    pub activations: String,
    /// Applies to formats without an explicit `:zp` / `:zb` suffix.
    pub zero_encoding: ZeroEncoding,
    pub bias_mode: BiasMode,
    /// Integer bias for fixed mode; the IEEE bias `2^(e-1) - 1` when absent.
    pub fixed_bias: Option<i32>,
    pub init: BiasInit,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weights: "E3M2".into(),
            activations: "E3M2".into(),
            zero_encoding: ZeroEncoding::Point,
            bias_mode: BiasMode::Learned,
            fixed_bias: None,
            init: BiasInit::Headroom,
        }
    }
}

impl QuantConfig {
    fn resolve(&self, s: &str) -> Result<MinifloatFormat> {
        let (fmt, explicit) = MinifloatFormat::parse_with_suffix(s)?;
        Ok(if explicit { fmt } else { fmt.with_zero_encoding(self.zero_encoding) })
    }

    pub fn weight_format(&self) -> Result<MinifloatFormat> {
        self.resolve(&self.weights)
    }

    pub fn activation_format(&self) -> Result<MinifloatFormat> {
        self.resolve(&self.activations)
    }

    pub fn template(&self) -> Result<QuantTemplate> {
        Ok(QuantTemplate { weight: self.weight_format()?, activation: self.activation_format()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    /// Image/mask directories for the `dir-seg` task.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    /// Seed of the synthetic classification set.
    pub classify_seed: u64,
    pub classes: usize,
    pub synthetic: SyntheticShipConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 512,
            test_samples: 128,
            train_dir: None,
            test_dir: None,
            classify_seed: 0,
            classes: 10,
            synthetic: SyntheticShipConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub ste_clip_zero: bool,
    pub model: ModelSpec,
    pub quant: QuantConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::SyntheticSeg,
            seed: 0,
            epochs: 20,
            batch_size: 32,
            warmup_iters: 200,
            ste_clip_zero: false,
            model: ModelSpec::default(),
            quant: QuantConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Explicit path, else `$MFQAT_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn ste(&self) -> SteMode {
        if self.ste_clip_zero {
            SteMode::ClipZero
        } else {
            SteMode::Identity
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optim.validate()?;
        self.quant.template().map_err(|e| Error::Config(format!("quant: {e}")))?;
        match (self.task, self.model) {
            (Task::SanityClassify, ModelSpec::ToyClassifier { .. }) => {}
            (Task::SanityClassify, _) | (_, ModelSpec::ToyClassifier { .. }) => {
                return Err(Error::Config(format!("model {} does not fit task {:?}", self.model, self.task)));
            }
            _ => {}
        }
        if self.task == Task::SyntheticSeg {
            self.data.synthetic.validate()?;
            let [c, h, _] = self.model.input_shape();
            if c != self.data.synthetic.channels || h != self.data.synthetic.size {
                return Err(Error::Config("model input does not match synthetic data shape".into()));
            }
        }
        if self.task == Task::DirSeg && self.data.train_dir.is_none() {
            return Err(Error::Config("dir-seg needs data.train_dir".into()));
        }
        if self.task != Task::DirSeg && (self.data.train_samples == 0 || self.data.test_samples == 0) {
            return Err(Error::Config("train and test sample counts must be positive".into()));
        }
        Ok(())
    }
}
