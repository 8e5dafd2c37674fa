//! Seeded synthetic scenes standing in for a real segmentation dataset,
//! plus superpatch statistics and on-disk dataset layout.
//!
//! A scene is a background of class 0 overlaid with axis-aligned
//! rectangles and ellipses of classes `1..C`. Each class has a fixed base
//! color; pixels get seeded uniform noise on top.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, CtsError, Result};
use crate::format;
use crate::tensor::Tensor;

/// RGB image stored channel-major `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(dim_err!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![Self::CHANNELS, self.height, self.width], self.data.clone())
            .expect("image data matches its shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [3, h, w] => Self::new(h, w, t.data().to_vec()),
            ref s => Err(dim_err!("image tensor must be [3,H,W], got {s:?}")),
        }
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(dim_err!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u16) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn max_class(&self) -> Option<u16> {
        self.labels.iter().copied().max()
    }

    /// Superpatch grid `(rows, cols)` for patch size `p`.
    pub fn superpatch_grid(&self, patch_size: usize) -> Result<(usize, usize)> {
        superpatch_grid(self.height, self.width, patch_size)
    }

    /// Row-major flags: `true` where the `2p × 2p` square holds one class.
    pub fn single_class_superpatches(&self, patch_size: usize) -> Result<Vec<bool>> {
        let (rows, cols) = self.superpatch_grid(patch_size)?;
        let side = 2 * patch_size;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let first = self.at(r * side, c * side);
                let uniform = (r * side..(r + 1) * side)
                    .all(|y| self.labels[y * self.width + c * side..][..side].iter().all(|&l| l == first));
                out.push(uniform);
            }
        }
        Ok(out)
    }
}

pub fn superpatch_grid(height: usize, width: usize, patch_size: usize) -> Result<(usize, usize)> {
    let side = 2 * patch_size;
    if patch_size == 0 || height == 0 || width == 0 || !height.is_multiple_of(side) || !width.is_multiple_of(side) {
        return Err(config_err!(
            "{height}x{width} is not divisible into superpatches of {side}x{side} pixels"
        ));
    }
    Ok((height / side, width / side))
}

/// Everything that determines one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_shapes: usize,
    pub noise_amplitude: f64,
    pub patch_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            num_classes: 5,
            num_shapes: 6,
            noise_amplitude: 0.05,
            patch_size: 4,
        }
    }
}

/// Base color of a class. The first entries are hand-picked to be far
/// apart; later classes walk the hue circle.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.45],
        [0.85, 0.20, 0.15],
        [0.15, 0.65, 0.25],
        [0.20, 0.30, 0.85],
        [0.90, 0.80, 0.20],
        [0.70, 0.25, 0.75],
        [0.15, 0.75, 0.80],
        [0.95, 0.55, 0.10],
    ];
    if let Some(c) = PALETTE.get(class) {
        return *c;
    }
    let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

/// Renders one scene. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, SegMask)> {
    if spec.num_classes < 2 {
        return Err(config_err!("need at least 2 classes, got {}", spec.num_classes));
    }
    if spec.num_classes > u16::MAX as usize {
        return Err(config_err!("at most {} classes supported", u16::MAX));
    }
    if !(0.0..=1.0).contains(&spec.noise_amplitude) {
        return Err(config_err!("noise amplitude {} outside [0,1]", spec.noise_amplitude));
    }
    superpatch_grid(spec.height, spec.width, spec.patch_size)?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = vec![0u16; h * w];
    let min_side = (h.min(w) as f64 / 12.0).max(1.0);
    let max_side = h.min(w) as f64 / 3.0;
    for _ in 0..spec.num_shapes {
        let class = rng.random_range(1..spec.num_classes) as u16;
        let ellipse = rng.random_bool(0.5);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(min_side..=max_side);
        let rx = rng.random_range(min_side..=max_side);
        for y in 0..h {
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dy.abs() > 1.0 {
                continue;
            }
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0
                };
                if inside {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            let base = class_color(labels[i] as usize)[c];
            let noise = if spec.noise_amplitude > 0.0 {
                rng.random_range(-spec.noise_amplitude..=spec.noise_amplitude)
            } else {
                0.0
            };
            data[c * h * w + i] = (base + noise).clamp(0.0, 1.0);
        }
    }
    Ok((Image::new(h, w, data)?, SegMask::new(h, w, labels)?))
}

/// Histogram of images binned by the percentage of superpatches
/// that contain a single class, in 5% bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpatchHistogram {
    /// Per-image single-class percentage, in `[0, 100]`.
    pub percentages: Vec<f64>,
    /// `counts[b]` covers `[5b, 5b+5)`; the last bin is closed at 100.
    pub counts: [usize; Self::BINS],
}

impl SuperpatchHistogram {
    pub const BINS: usize = 20;
    pub const BIN_WIDTH: f64 = 5.0;

    pub fn bin_of(percentage: f64) -> usize {
        ((percentage / Self::BIN_WIDTH).floor() as usize).min(Self::BINS - 1)
    }

    pub fn nonzero_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# single-class superpatch histogram ({} images)", self.percentages.len());
        let _ = writeln!(s, "{:>12} {:>8}", "bin(%)", "images");
        for (b, &n) in self.counts.iter().enumerate() {
            let lo = b as f64 * Self::BIN_WIDTH;
            let close = if b + 1 == Self::BINS { ']' } else { ')' };
            let _ = writeln!(s, "{:>5}-{:<5}{} {:>8}", format!("[{lo}"), lo + Self::BIN_WIDTH, close, n);
        }
        let mean = self.percentages.iter().sum::<f64>() / self.percentages.len().max(1) as f64;
        let _ = writeln!(s, "images={}", self.percentages.len());
        let _ = writeln!(s, "mean_single_class_pct={mean:.4}");
        for (b, &n) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "bin_{:02}={}", b, n);
        }
        s
    }
}

pub fn superpatch_stats(masks: &[SegMask], patch_size: usize) -> Result<SuperpatchHistogram> {
    let mut percentages = Vec::with_capacity(masks.len());
    let mut counts = [0usize; SuperpatchHistogram::BINS];
    for m in masks {
        let flags = m.single_class_superpatches(patch_size)?;
        let pct = 100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        counts[SuperpatchHistogram::bin_of(pct)] += 1;
        percentages.push(pct);
    }
    Ok(SuperpatchHistogram {
        percentages,
        counts,
    })
}

/// Recipe for a whole dataset: scene `i` uses seed `base_seed + i` and a
/// shape count drawn deterministically from `min_shapes..=max_shapes`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub base_seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_amplitude: f64,
    pub patch_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            base_seed: 0,
            count: 200,
            height: 64,
            width: 64,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 10,
            noise_amplitude: 0.05,
            patch_size: 4,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DatasetSpec {
    pub fn scene(&self, index: usize) -> SceneSpec {
        let seed = self.base_seed.wrapping_add(index as u64);
        let span = self.max_shapes.saturating_sub(self.min_shapes) as u64 + 1;
        SceneSpec {
            seed,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            num_shapes: self.min_shapes + (splitmix(seed) % span) as usize,
            noise_amplitude: self.noise_amplitude,
            patch_size: self.patch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub spec: SceneSpec,
    pub image: Image,
    pub mask: SegMask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        if spec.min_shapes > spec.max_shapes {
            return Err(config_err!(
                "min_shapes {} exceeds max_shapes {}",
                spec.min_shapes,
                spec.max_shapes
            ));
        }
        let samples = (0..spec.count)
            .map(|i| {
                let scene = spec.scene(i);
                let (image, mask) = generate_scene(&scene)?;
                Ok(Sample {
                    index: i,
                    spec: scene,
                    image,
                    mask,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn masks(&self) -> Vec<SegMask> {
        self.samples.iter().map(|s| s.mask.clone()).collect()
    }

    /// Splits off the last `n_val` samples.
    pub fn split(mut self, n_val: usize) -> (Dataset, Dataset) {
        let cut = self.samples.len().saturating_sub(n_val);
        let val = self.samples.split_off(cut);
        (self, Dataset { samples: val })
    }

    pub fn num_classes(&self) -> usize {
        self.samples.first().map_or(0, |s| s.spec.num_classes)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| CtsError::io(root, e))?;
        let mut manifest = String::new();
        for s in &self.samples {
            write_image(root.join(format!("img_{}.ctsf", s.index)), &s.image)?;
            write_mask(root.join(format!("mask_{}.ctsm", s.index)), &s.mask)?;
            let _ = writeln!(manifest, "{}", manifest_line(s.index, &s.spec));
        }
        let path = root.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| CtsError::io(&path, e))
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| CtsError::io(&path, e))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (index, spec) = parse_manifest_line(line)
                .map_err(|e| config_err!("{}:{}: {e}", path.display(), n + 1))?;
            let image = read_image(root.join(format!("img_{index}.ctsf")))?;
            let mask = read_mask(root.join(format!("mask_{index}.ctsm")))?;
            if (image.height, image.width) != (mask.height, mask.width) {
                return Err(dim_err!("sample {index}: image and mask sizes differ"));
            }
            samples.push(Sample {
                index,
                spec,
                image,
                mask,
            });
        }
        Ok(Self { samples })
    }
}

pub fn manifest_line(index: usize, s: &SceneSpec) -> String {
    format!(
        "index={} seed={} height={} width={} num_classes={} num_shapes={} noise_amplitude={} patch_size={}",
        index, s.seed, s.height, s.width, s.num_classes, s.num_shapes, s.noise_amplitude, s.patch_size
    )
}

fn parse_manifest_line(line: &str) -> std::result::Result<(usize, SceneSpec), String> {
    let mut index = None;
    let mut spec = SceneSpec::default();
    let mut seen = 0;
    for kv in line.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
        let bad = |_| format!("bad value for {k}: {v:?}");
        match k {
            "index" => index = Some(v.parse().map_err(bad)?),
            "seed" => spec.seed = v.parse().map_err(bad)?,
            "height" => spec.height = v.parse().map_err(bad)?,
            "width" => spec.width = v.parse().map_err(bad)?,
            "num_classes" => spec.num_classes = v.parse().map_err(bad)?,
            "num_shapes" => spec.num_shapes = v.parse().map_err(bad)?,
            "noise_amplitude" => spec.noise_amplitude = v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?,
            "patch_size" => spec.patch_size = v.parse().map_err(bad)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        seen += 1;
    }
    if seen != 8 {
        return Err(format!("expected 8 fields, found {seen}"));
    }
    Ok((index.ok_or("missing index")?, spec))
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    format::write_tensor(path, &img.to_tensor())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    Image::from_tensor(&format::read_tensor(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &SegMask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format::encode_mask(mask.height, mask.width, &mask.labels))
        .map_err(|e| CtsError::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CtsError::io(path, e))?;
    let (h, w, labels) = format::decode_mask(&bytes)?;
    SegMask::new(h, w, labels)
}
