//! Datasets: seeded synthetic ship segmentation, deterministic
//! augmentation, a synthetic classification set, and a PPM/PGM directory
//! loader.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qat::{Batch, Targets};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    /// `(C, H, W)`, values in `[0, 1]`.
    pub image: Tensor,
    /// `(1, H, W)`, values in `{0, 1}`.
    pub mask: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShipShape {
    Rectangle,
    Ellipse,
}

/// Axis-aligned object; `(cx, cy)` is the centre in pixel coordinates and
/// `(hw, hh)` the half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ship {
    pub shape: ShipShape,
    pub cx: f64,
    pub cy: f64,
    pub hw: f64,
    pub hh: f64,
    pub brightness: f64,
}

impl Ship {
    /// Whether the centre of pixel `(x, y)` lies inside the object.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.hw;
        let dy = (y as f64 + 0.5 - self.cy) / self.hh;
        match self.shape {
            ShipShape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShipShape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShipConfig {
    pub size: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range in pixels (full width or height).
    pub min_extent: f64,
    pub max_extent: f64,
    /// Background intensity range.
    pub background: [f64; 2],
    /// Object intensity range.
    pub object_brightness: [f64; 2],
    /// Standard deviation of the Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticShipConfig {
    fn default() -> Self {
        Self {
            size: 64,
            channels: 3,
            min_objects: 0,
            max_objects: 3,
            min_extent: 4.0,
            max_extent: 16.0,
            background: [0.1, 0.4],
            object_brightness: [0.35, 0.8],
            noise: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticShipConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.size == 0 || self.channels == 0 {
            return bad("size and channels must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("object count range is empty");
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent && self.max_extent.is_finite()) {
            return bad("object extent range is empty");
        }
        for (name, [lo, hi]) in [("background", self.background), ("object_brightness", self.object_brightness)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("synthetic data: {name} must be a range inside [0, 1]")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream keys.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG keyed by a tuple of integers.
pub fn keyed_rng(keys: &[u64]) -> ChaCha8Rng {
    let seed = keys.iter().fold(0x5EED_u64, |acc, &k| mix(acc ^ mix(k)));
    ChaCha8Rng::seed_from_u64(seed)
}

const GEN_DOMAIN: u64 = 1;
const AUG_DOMAIN: u64 = 2;
const CLS_DOMAIN: u64 = 3;

/// Draws the objects of one scene.
pub fn synthetic_ships(cfg: &SyntheticShipConfig, rng: &mut ChaCha8Rng) -> Vec<Ship> {
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let s = cfg.size as f64;
    (0..count)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) { ShipShape::Rectangle } else { ShipShape::Ellipse };
            let hw = rng.gen_range(cfg.min_extent..=cfg.max_extent) / 2.0;
            let hh = rng.gen_range(cfg.min_extent..=cfg.max_extent) / 2.0;
            Ship {
                shape,
                cx: rng.gen_range(0.0..s),
                cy: rng.gen_range(0.0..s),
                hw,
                hh,
                brightness: rng.gen_range(cfg.object_brightness[0]..=cfg.object_brightness[1]),
            }
        })
        .collect()
}

/// One sample and the geometry it was rasterized from.
pub fn synthetic_sample(cfg: &SyntheticShipConfig, index: u64) -> (SegmentationSample, Vec<Ship>) {
    let mut rng = keyed_rng(&[GEN_DOMAIN, cfg.seed, index]);
    let ships = synthetic_ships(cfg, &mut rng);
    let (c, s) = (cfg.channels, cfg.size);
    let background = rng.gen_range(cfg.background[0]..=cfg.background[1]);
    let tint: Vec<f64> = (0..c).map(|_| rng.gen_range(0.9..1.1)).collect();
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut mask = vec![0.0; s * s];
    let mut base = vec![background; s * s];
    for ship in &ships {
        for y in 0..s {
            for x in 0..s {
                if ship.covers(x, y) {
                    mask[y * s + x] = 1.0;
                    base[y * s + x] = ship.brightness;
                }
            }
        }
    }
    let mut image = Vec::with_capacity(c * s * s);
    for t in &tint {
        for &b in &base {
            image.push((b * t + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    let sample = SegmentationSample {
        image: Tensor::new(vec![c, s, s], image).expect("sized"),
        mask: Tensor::new(vec![1, s, s], mask).expect("sized"),
    };
    (sample, ships)
}

/// `n` samples; a pure function of `(cfg, n)`.
pub fn gen_synthetic_segmentation(cfg: &SyntheticShipConfig, n: usize) -> Result<Vec<SegmentationSample>> {
    gen_synthetic_range(cfg, 0, n)
}

/// Samples `start..start + n` of the seeded sequence.
pub fn gen_synthetic_range(cfg: &SyntheticShipConfig, start: u64, n: usize) -> Result<Vec<SegmentationSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    Ok((start..start + n as u64).map(|i| synthetic_sample(cfg, i).0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip: bool,
    pub vflip: bool,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    /// Additive brightness shift drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: false, hflip: true, vflip: true, min_crop: 0.8, brightness: 0.1, contrast: 0.2 }
    }
}

/// Deterministic augmentation keyed by `(seed, index, epoch)`: flips, a
/// random crop resized back with nearest-neighbour sampling, brightness
/// and contrast.
pub fn augment(sample: &SegmentationSample, cfg: &AugmentConfig, seed: u64, index: u64, epoch: u64) -> SegmentationSample {
    if !cfg.enabled {
        return sample.clone();
    }
    let mut rng = keyed_rng(&[AUG_DOMAIN, seed, index, epoch]);
    let [c, h, w] = [sample.image.shape()[0], sample.image.shape()[1], sample.image.shape()[2]];
    let hflip = cfg.hflip && rng.gen_bool(0.5);
    let vflip = cfg.vflip && rng.gen_bool(0.5);
    let frac = if cfg.min_crop < 1.0 { rng.gen_range(cfg.min_crop.max(0.05)..=1.0) } else { 1.0 };
    let (ch, cw) = (((h as f64 * frac).round() as usize).clamp(1, h), ((w as f64 * frac).round() as usize).clamp(1, w));
    let (oy, ox) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
    let shift = if cfg.brightness > 0.0 { rng.gen_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
    let gain = if cfg.contrast > 0.0 { rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) } else { 1.0 };

    let src = |y: usize, x: usize| {
        let sy = oy + y * ch / h;
        let sx = ox + x * cw / w;
        let sy = if vflip { oy + ch - 1 - (sy - oy) } else { sy };
        let sx = if hflip { ox + cw - 1 - (sx - ox) } else { sx };
        sy * w + sx
    };
    let mut image = vec![0.0; c * h * w];
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = src(y, x);
            mask[y * w + x] = sample.mask.data()[s];
            for k in 0..c {
                image[k * h * w + y * w + x] = sample.image.data()[k * h * w + s];
            }
        }
    }
    let mean = image.iter().sum::<f64>() / image.len() as f64;
    for v in &mut image {
        *v = ((*v - mean) * gain + mean + shift).clamp(0.0, 1.0);
    }
    SegmentationSample {
        image: Tensor::new(vec![c, h, w], image).expect("sized"),
        mask: Tensor::new(vec![1, h, w], mask).expect("sized"),
    }
}

/// Stacks samples into one `(N, C, H, W)` batch with mask targets.
pub fn segmentation_batch(samples: &[&SegmentationSample]) -> Result<Batch> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok(Batch { inputs: Tensor::stack(&images)?, targets: Targets::Masks(Tensor::stack(&masks)?) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSample {
    pub image: Tensor,
    pub label: usize,
}

/// Synthetic `classes`-way task: a bright 4x4 patch whose position on a
/// coarse grid encodes the label, over uniform noise.
pub fn gen_synthetic_classification(
    size: usize,
    classes: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<ClassificationSample>> {
    if n == 0 || classes < 2 || size < 8 {
        return Err(Error::InvalidArgument("need n > 0, classes >= 2 and size >= 8".into()));
    }
    let cells = size / 4;
    if classes > cells * cells {
        return Err(Error::InvalidArgument(format!("{classes} classes do not fit a {size}x{size} image")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut rng = keyed_rng(&[CLS_DOMAIN, seed, i]);
        let label = rng.gen_range(0..classes);
        let mut img: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..0.4)).collect();
        let (gy, gx) = (label / cells * 4, label % cells * 4);
        for y in gy..gy + 4 {
            for x in gx..gx + 4 {
                img[y * size + x] = rng.gen_range(0.7..1.0);
            }
        }
        out.push(ClassificationSample { image: Tensor::new(vec![1, size, size], img)?, label });
    }
    Ok(out)
}

pub fn classification_batch(samples: &[&ClassificationSample]) -> Result<Batch> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Ok(Batch { inputs: Tensor::stack(&images)?, targets: Targets::Labels(samples.iter().map(|s| s.label).collect()) })
}

/// Decoded binary netpbm image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

/// Parses a binary `P6` (RGB) or `P5` (grey) image with `maxval <= 255`.
pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let bad = |m: &str| Error::Parse(format!("netpbm: {m}"));
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad("expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a number in header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let need = width * height * channels;
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(Pnm { width, height, channels, maxval: maxval as u16, data: data.to_vec() })
}

/// `<name>.ppm` + `<name>.mask.pgm` pairs in lexicographic basename order.
#[derive(Debug, Clone)]
pub struct ImageMaskDir {
    pairs: std::vec::IntoIter<(PathBuf, PathBuf)>,
}

impl ImageMaskDir {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.len() == 0
    }
}

pub fn load_image_mask_dir(dir: &Path) -> Result<ImageMaskDir> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(base) = name.strip_suffix(".mask.pgm") {
            masks.push(base.to_string());
        } else if let Some(base) = name.strip_suffix(".ppm") {
            images.push(base.to_string());
        }
    }
    images.sort();
    masks.sort();
    if let Some(m) = masks.iter().find(|m| images.binary_search(m).is_err()) {
        return Err(Error::InvalidArgument(format!("mask {m}.mask.pgm has no image")));
    }
    if let Some(i) = images.iter().find(|i| masks.binary_search(i).is_err()) {
        return Err(Error::InvalidArgument(format!("image {i}.ppm has no mask")));
    }
    let pairs: Vec<_> = images
        .into_iter()
        .map(|b| (dir.join(format!("{b}.ppm")), dir.join(format!("{b}.mask.pgm"))))
        .collect();
    Ok(ImageMaskDir { pairs: pairs.into_iter() })
}

fn load_pair(image: &Path, mask: &Path) -> Result<SegmentationSample> {
    let ctx = |p: &Path, e: Error| Error::Parse(format!("{}: {e}", p.display()));
    let img = parse_pnm(&fs::read(image)?).map_err(|e| ctx(image, e))?;
    let msk = parse_pnm(&fs::read(mask)?).map_err(|e| ctx(mask, e))?;
    if img.channels != 3 || msk.channels != 1 {
        return Err(Error::Parse(format!("{}: expected a P6 image and a P5 mask", image.display())));
    }
    if (img.width, img.height) != (msk.width, msk.height) {
        return Err(Error::Shape(format!(
            "{}: image {}x{} vs mask {}x{}",
            image.display(),
            img.width,
            img.height,
            msk.width,
            msk.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let scale = img.maxval as f64;
    let mut planar = vec![0.0; 3 * w * h];
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * w * h + p] = px[c] as f64 / scale;
        }
    }
    let mask = msk.data.iter().map(|&v| if v > 127 { 1.0 } else { 0.0 }).collect();
    Ok(SegmentationSample { image: Tensor::new(vec![3, h, w], planar)?, mask: Tensor::new(vec![1, h, w], mask)? })
}

impl Iterator for ImageMaskDir {
    type Item = Result<SegmentationSample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.pairs.next().map(|(i, m)| load_pair(&i, &m))
    }
}
