//! Model builders: Thin U-Net 32, a two-scale toy encoder-decoder and a
//! small classifier, all expressed in the [`ModelGraph`] layer vocabulary.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Block, Layer, LinearKind, ModelGraph, Parameter, QuantTemplate};
use crate::tensor::Tensor;

/// Width of every intermediate convolution in Thin U-Net 32.
pub const UNET_WIDTH: usize = 32;
/// Encoder and decoder stage count of Thin U-Net 32.
pub const UNET_STAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    ThinUnet32 { in_channels: usize, size: usize },
    /// Two-scale encoder-decoder with one skip connection.
    ToySeg { in_channels: usize, size: usize, c1: usize, c2: usize },
    /// conv, pool, conv, pool, dense.
    ToyClassifier { in_channels: usize, size: usize, classes: usize },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::ToySeg { in_channels: 3, size: 64, c1: 8, c2: 16 }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModelSpec::ThinUnet32 { in_channels, size } => write!(f, "thin-unet32 {in_channels}x{size}x{size}"),
            ModelSpec::ToySeg { in_channels, size, c1, c2 } => {
                write!(f, "toy-seg {in_channels}x{size}x{size} c1={c1} c2={c2}")
            }
            ModelSpec::ToyClassifier { in_channels, size, classes } => {
                write!(f, "toy-classifier {in_channels}x{size}x{size} classes={classes}")
            }
        }
    }
}

impl ModelSpec {
    pub fn input_shape(&self) -> [usize; 3] {
        match *self {
            ModelSpec::ThinUnet32 { in_channels, size }
            | ModelSpec::ToySeg { in_channels, size, .. }
            | ModelSpec::ToyClassifier { in_channels, size, .. } => [in_channels, size, size],
        }
    }

    pub fn is_segmentation(&self) -> bool {
        !matches!(self, ModelSpec::ToyClassifier { .. })
    }

    pub fn build(&self, quant: Option<QuantTemplate>, seed: u64) -> Result<ModelGraph> {
        match *self {
            ModelSpec::ThinUnet32 { in_channels, size } => build_thin_unet32(in_channels, size, quant, seed),
            ModelSpec::ToySeg { in_channels, size, c1, c2 } => build_toy_seg(in_channels, size, c1, c2, quant, seed),
            ModelSpec::ToyClassifier { in_channels, size, classes } => {
                build_toy_classifier(in_channels, size, classes, quant, seed)
            }
        }
    }
}

struct Builder {
    graph: ModelGraph,
    rng: ChaCha8Rng,
    quant: Option<QuantTemplate>,
}

impl Builder {
    fn new(input: [usize; 3], quant: Option<QuantTemplate>, seed: u64) -> Self {
        Self { graph: ModelGraph::new(input), rng: ChaCha8Rng::seed_from_u64(seed), quant }
    }

    /// He-normal weights, zero bias.
    fn weight(&mut self, shape: Vec<usize>) -> Parameter {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Parameter::new(Tensor::new(shape, data).expect("shape matches"))
    }

    fn conv(&mut self, name: &str, input: usize, cin: usize, cout: usize, kernel: usize, hidden: bool) -> usize {
        let block = Block {
            kind: LinearKind::Conv { kernel },
            weight: self.weight(vec![cout, cin, kernel, kernel]),
            bias: Parameter::new(Tensor::zeros(&[cout])),
            bn: hidden.then(|| BatchNorm::new(cout)),
            relu: hidden,
            quant: self.quant.map(|t| t.attachment(hidden)),
        };
        self.graph.push(name, Layer::Block(block), vec![input])
    }

    fn dense(&mut self, name: &str, input: usize, fin: usize, fout: usize) -> usize {
        let block = Block {
            kind: LinearKind::Dense,
            weight: self.weight(vec![fout, fin]),
            bias: Parameter::new(Tensor::zeros(&[fout])),
            bn: None,
            relu: false,
            quant: self.quant.map(|t| t.attachment(false)),
        };
        self.graph.push(name, Layer::Block(block), vec![input])
    }

    fn op(&mut self, name: &str, layer: Layer, inputs: Vec<usize>) -> usize {
        self.graph.push(name, layer, inputs)
    }

    fn finish(self) -> Result<ModelGraph> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}

fn check_common(in_channels: usize, size: usize, divisor: usize) -> Result<()> {
    if in_channels == 0 {
        return Err(Error::InvalidArgument("in_channels must be at least 1".into()));
    }
    if size == 0 || !size.is_multiple_of(divisor) {
        return Err(Error::InvalidArgument(format!("input size {size} must be a positive multiple of {divisor}")));
    }
    Ok(())
}

/// Thin U-Net 32: five encoder stages of `[conv3x3 + BN + ReLU] x 2` each
/// followed by a 2x2 max pool, five decoder stages of bilinear x2 upsample,
/// concatenation with the matching encoder output and
/// `[conv3x3 + BN + ReLU] x 2`, then a 1x1 convolution to one logit channel.
///
/// Five pooling steps require the input size to be a multiple of 32.
pub fn build_thin_unet32(in_channels: usize, size: usize, quant: Option<QuantTemplate>, seed: u64) -> Result<ModelGraph> {
    check_common(in_channels, size, 1 << UNET_STAGES)?;
    let w = UNET_WIDTH;
    let mut b = Builder::new([in_channels, size, size], quant, seed);
    let mut x = 0;
    let mut cin = in_channels;
    let mut skips = Vec::with_capacity(UNET_STAGES);
    for s in 1..=UNET_STAGES {
        x = b.conv(&format!("enc{s}.conv1"), x, cin, w, 3, true);
        x = b.conv(&format!("enc{s}.conv2"), x, w, w, 3, true);
        skips.push(x);
        x = b.op(&format!("enc{s}.pool"), Layer::MaxPool2, vec![x]);
        cin = w;
    }
    for s in (1..=UNET_STAGES).rev() {
        let up = b.op(&format!("dec{s}.up"), Layer::Upsample2, vec![x]);
        let cat = b.op(&format!("dec{s}.cat"), Layer::Concat, vec![up, skips[s - 1]]);
        x = b.conv(&format!("dec{s}.conv1"), cat, 2 * w, w, 3, true);
        x = b.conv(&format!("dec{s}.conv2"), x, w, w, 3, true);
    }
    b.conv("head", x, w, 1, 1, false);
    b.finish()
}

/// Two-scale encoder-decoder: `conv(c1)`, pool, `conv(c2)`, upsample,
/// concat with the first-scale features, `conv(c1)`, 1x1 head.
pub fn build_toy_seg(
    in_channels: usize,
    size: usize,
    c1: usize,
    c2: usize,
    quant: Option<QuantTemplate>,
    seed: u64,
) -> Result<ModelGraph> {
    check_common(in_channels, size, 2)?;
    if c1 == 0 || c2 == 0 {
        return Err(Error::InvalidArgument("toy model stages need at least one channel".into()));
    }
    let mut b = Builder::new([in_channels, size, size], quant, seed);
    let e1 = b.conv("enc1.conv", 0, in_channels, c1, 3, true);
    let p = b.op("enc1.pool", Layer::MaxPool2, vec![e1]);
    let e2 = b.conv("enc2.conv", p, c1, c2, 3, true);
    let up = b.op("dec1.up", Layer::Upsample2, vec![e2]);
    let cat = b.op("dec1.cat", Layer::Concat, vec![up, e1]);
    let d = b.conv("dec1.conv", cat, c1 + c2, c1, 3, true);
    b.conv("head", d, c1, 1, 1, false);
    b.finish()
}

/// `conv(8)`, pool, `conv(16)`, pool, dense to `classes` logits.
pub fn build_toy_classifier(
    in_channels: usize,
    size: usize,
    classes: usize,
    quant: Option<QuantTemplate>,
    seed: u64,
) -> Result<ModelGraph> {
    check_common(in_channels, size, 4)?;
    if classes < 2 {
        return Err(Error::InvalidArgument("classifier needs at least two classes".into()));
    }
    let mut b = Builder::new([in_channels, size, size], quant, seed);
    let c1 = b.conv("conv1", 0, in_channels, 8, 3, true);
    let p1 = b.op("pool1", Layer::MaxPool2, vec![c1]);
    let c2 = b.conv("conv2", p1, 8, 16, 3, true);
    let p2 = b.op("pool2", Layer::MaxPool2, vec![c2]);
    let s = size / 4;
    b.dense("fc", p2, 16 * s * s, classes);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_unet_shapes() {
        let m = build_thin_unet32(3, 64, None, 0).unwrap();
        assert_eq!(m.validate().unwrap(), vec![1, 64, 64]);
        assert!(build_thin_unet32(0, 64, None, 0).is_err());
        assert!(build_thin_unet32(3, 48, None, 0).is_err());
    }

    #[test]
    fn toy_shapes() {
        let m = build_toy_seg(1, 32, 8, 16, None, 0).unwrap();
        assert_eq!(m.validate().unwrap(), vec![1, 32, 32]);
        let c = build_toy_classifier(1, 16, 10, None, 0).unwrap();
        assert_eq!(c.validate().unwrap(), vec![10]);
        assert!(build_toy_seg(1, 32, 0, 16, None, 0).is_err());
        assert!(build_toy_seg(1, 31, 8, 16, None, 0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = build_toy_seg(3, 16, 8, 16, None, 5).unwrap();
        let b = build_toy_seg(3, 16, 8, 16, None, 5).unwrap();
        let c = build_toy_seg(3, 16, 8, 16, None, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn spec_serde_roundtrip() {
        let spec = ModelSpec::ThinUnet32 { in_channels: 3, size: 256 };
        let text = toml::to_string(&spec).unwrap();
        assert!(text.contains("kind = \"thin-unet32\""));
        assert_eq!(toml::from_str::<ModelSpec>(&text).unwrap(), spec);
    }
}
