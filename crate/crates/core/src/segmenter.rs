//! Segmentation decoders and the two token-sharing pipelines.
//!
//! * eq1 path: share → ViT → per-token linear decoder → unshare
//!   predictions → raster → upsample.
//! * eq2 path: share → ViT → unshare tokens → raster → spatial conv
//!   decoder → upsample.
//!
//! Upsampling from patch to pixel resolution is bilinear ×P. On the eq1
//! path a shared token's prediction is upsampled from its single cell over
//! the whole superpatch, so every pixel of a shared superpatch carries the
//! same logits; all other pixels use bilinear ×P of the patch grid.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RowMix, Tape, Var};
use crate::data::{Dataset, Image, Sample, SegMask};
use crate::error::{config_err, dim_err, Result};
use crate::optim::AdamW;
use crate::params::{Bound, ParamId, ParamStore};
use crate::policy::{gt_policy, random_policy, select_top_s, SharingPolicy};
use crate::policy_net::{PolicyNet, TrainLog};
use crate::sharing::{self, GridGeom, TokenLayout};
use crate::tensor::Tensor;
use crate::vit::{normal, vit_forward, ViTConfig, Vit, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// Per-token linear head, eq1 path.
    Linear,
    /// Spatial conv head, eq2 path.
    Spatial,
}

impl DecoderKind {
    pub fn path_name(self) -> &'static str {
        match self {
            DecoderKind::Linear => "eq1",
            DecoderKind::Spatial => "eq2",
        }
    }

    pub fn from_path(s: &str) -> Result<Self> {
        match s {
            "eq1" => Ok(DecoderKind::Linear),
            "eq2" => Ok(DecoderKind::Spatial),
            other => Err(config_err!("unknown path {other:?}, expected eq1 or eq2")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegConfig {
    pub vit: ViTConfig,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub decoder: DecoderKind,
    /// Channel width of the spatial decoder's 3×3 convs.
    pub spatial_hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::default(),
            height: 64,
            width: 64,
            num_classes: 5,
            decoder: DecoderKind::Linear,
            spatial_hidden: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            iterations: 300,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn geom(&self) -> Result<GridGeom> {
        let g = GridGeom::new(self.height, self.width, self.vit.patch_size)?;
        g.superpatch_grid()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialHead {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub enum Decoder {
    Linear(LinearHead),
    Spatial(SpatialHead),
}

/// Per-token affine map `[M,E]·[E,C] + b`.
pub fn linear_decode(tape: &mut Tape, tokens: Var, head_w: Var, head_b: Var) -> Result<Var> {
    let p = tape.matmul(tokens, head_w)?;
    tape.add_row_bias(p, head_b)
}

/// Two padded 3×3 conv + GELU stages, then a 1×1 head; resolution kept.
pub fn spatial_decode(tape: &mut Tape, features: Var, bound: &Bound, head: &SpatialHead) -> Result<Var> {
    let x = tape.conv2d(features, bound[head.conv1_w], 1, 1)?;
    let x = tape.add_channel_bias(x, bound[head.conv1_b])?;
    let x = tape.gelu(x);
    let x = tape.conv2d(x, bound[head.conv2_w], 1, 1)?;
    let x = tape.add_channel_bias(x, bound[head.conv2_b])?;
    let x = tape.gelu(x);
    let x = tape.conv2d(x, bound[head.head_w], 1, 0)?;
    tape.add_channel_bias(x, bound[head.head_b])
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegConfig,
    pub params: ParamStore,
    pub vit: Vit,
    pub decoder: Decoder,
}

/// Intermediate handles of one pipeline run.
#[derive(Debug, Clone)]
pub struct SegForward {
    /// Per-pixel logits `[C, H, W]`.
    pub logits: Var,
    pub layout: Arc<TokenLayout>,
    /// Backbone output `[M, E]`.
    pub backbone: Var,
    /// eq1: per-token predictions `[M, C]`.
    pub token_preds: Option<Var>,
    /// Patch-resolution logits `[C, H_L, W_L]` before pixel upsampling.
    pub patch_logits: Var,
    /// eq2: spatial features `[E, H_L, W_L]` fed to the decoder.
    pub spatial: Option<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl SegModel {
    pub fn init(config: SegConfig) -> Result<Self> {
        let geom = config.geom()?;
        if config.num_classes < 2 {
            return Err(config_err!("need at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let vit = Vit::init(config.vit, geom.num_patches(), &mut params, "vit.", &mut rng)?;
        let e = config.vit.embed_dim;
        let c = config.num_classes;
        let decoder = match config.decoder {
            DecoderKind::Linear => Decoder::Linear(LinearHead {
                w: params.add("dec.head.w", normal(&[e, c], INIT_STD, &mut rng)),
                b: params.add("dec.head.b", Tensor::zeros(&[c])),
            }),
            DecoderKind::Spatial => {
                let hid = config.spatial_hidden;
                let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
                Decoder::Spatial(SpatialHead {
                    conv1_w: params.add("dec.conv1.w", normal(&[hid, e, 3, 3], he(e * 9), &mut rng)),
                    conv1_b: params.add("dec.conv1.b", Tensor::zeros(&[hid])),
                    conv2_w: params.add("dec.conv2.w", normal(&[hid, hid, 3, 3], he(hid * 9), &mut rng)),
                    conv2_b: params.add("dec.conv2.b", Tensor::zeros(&[hid])),
                    head_w: params.add("dec.head.w", normal(&[c, hid, 1, 1], INIT_STD, &mut rng)),
                    head_b: params.add("dec.head.b", Tensor::zeros(&[c])),
                })
            }
        };
        Ok(Self {
            config,
            params,
            vit,
            decoder,
        })
    }

    pub fn geom(&self) -> GridGeom {
        self.config.geom().expect("validated at init")
    }

    pub fn superpatch_grid(&self) -> (usize, usize) {
        self.geom().superpatch_grid().expect("validated at init")
    }

    pub fn image_var(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        if (image.height, image.width) != (self.config.height, self.config.width) {
            return Err(dim_err!(
                "model expects {}x{} images, got {}x{}",
                self.config.height,
                self.config.width,
                image.height,
                image.width
            ));
        }
        let centered = image.data.iter().map(|v| v - 0.5).collect();
        tape.constant(&[3, image.height, image.width], centered)
    }

    /// Runs the pipeline matching this model's decoder.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: Var,
        policy: &SharingPolicy,
    ) -> Result<SegForward> {
        let geom = self.geom();
        let layout = Arc::new(TokenLayout::new(geom, policy)?);
        let tokens = sharing::share(
            tape,
            image,
            bound[self.vit.pos_table],
            layout.clone(),
            bound[self.vit.patch_proj],
            bound[self.vit.patch_bias],
        )?;
        let out = vit_forward(tape, bound, &self.vit, tokens.tokens)?;
        let (gh, gw) = (geom.grid_h(), geom.grid_w());
        let p = geom.patch_size;
        match &self.decoder {
            Decoder::Linear(head) => {
                let preds = linear_decode(tape, out.tokens, bound[head.w], bound[head.b])?;
                let per_slot = sharing::unshare_predictions(tape, preds, &layout)?;
                let patch_logits = sharing::to_spatial(tape, per_slot, gh, gw)?;
                let up = tape.bilinear_resize(patch_logits, geom.height, geom.width)?;
                let logits = if layout.num_shared() == 0 {
                    up
                } else {
                    shared_constant_upsample(tape, up, per_slot, &layout, self.config.num_classes)?
                };
                Ok(SegForward {
                    logits,
                    layout,
                    backbone: out.tokens,
                    token_preds: Some(preds),
                    patch_logits,
                    spatial: None,
                    attention: out.attention,
                })
            }
            Decoder::Spatial(head) => {
                let per_slot = sharing::unshare_tokens(tape, out.tokens, &layout)?;
                let spatial = sharing::to_spatial(tape, per_slot, gh, gw)?;
                let patch_logits = spatial_decode(tape, spatial, bound, head)?;
                let logits = tape.bilinear_resize(patch_logits, gh * p, gw * p)?;
                Ok(SegForward {
                    logits,
                    layout,
                    backbone: out.tokens,
                    token_preds: None,
                    patch_logits,
                    spatial: Some(spatial),
                    attention: out.attention,
                })
            }
        }
    }

    /// Per-pixel logits for one image under `policy`.
    pub fn predict(&self, image: &Image, policy: &SharingPolicy) -> Result<SegPrediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = self.image_var(&mut tape, image)?;
        let f = self.forward(&mut tape, &bound, x, policy)?;
        Ok(SegPrediction {
            num_classes: self.config.num_classes,
            height: image.height,
            width: image.width,
            logits: tape.value(f.logits).to_vec(),
        })
    }

    /// Per-pixel cross-entropy for one sample; adds grads into params.
    pub fn loss_and_grad(&mut self, sample: &Sample, policy: &SharingPolicy) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = self.image_var(&mut tape, &sample.image)?;
        let f = self.forward(&mut tape, &bound, x, policy)?;
        let loss = pixel_cross_entropy(&mut tape, f.logits, &sample.mask)?;
        let grads = tape.backward(loss)?;
        self.params.accumulate(&grads, &bound)?;
        Ok(tape.value(loss)[0])
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(config: SegConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut m = Self::init(config)?;
        m.params.load(path)?;
        Ok(m)
    }
}

/// Mean cross-entropy of `[C,H,W]` logits against a mask.
pub fn pixel_cross_entropy(tape: &mut Tape, logits: Var, mask: &SegMask) -> Result<Var> {
    let (c, h, w) = match *tape.shape(logits) {
        [c, h, w] => (c, h, w),
        ref s => return Err(dim_err!("pixel logits must be [C,H,W], got {s:?}")),
    };
    if (h, w) != (mask.height, mask.width) {
        return Err(dim_err!("logits {h}x{w} vs mask {}x{}", mask.height, mask.width));
    }
    let flat = tape.reshape(logits, &[c, h * w])?;
    let rows = tape.transpose(flat)?;
    let targets: Vec<usize> = mask.labels.iter().map(|&l| l as usize).collect();
    tape.cross_entropy(rows, &targets)
}

/// Replaces the bilinear upsample inside shared superpatches by the
/// shared token's constant prediction.
fn shared_constant_upsample(
    tape: &mut Tape,
    up: Var,
    per_slot: Var,
    layout: &TokenLayout,
    classes: usize,
) -> Result<Var> {
    let g = layout.geom;
    let p = g.patch_size;
    let (h, w) = (g.height, g.width);
    let pixel_slot: Vec<usize> = (0..h * w).map(|i| (i / w / p) * g.grid_w() + (i % w) / p).collect();
    let rep = tape.row_mix(per_slot, Arc::new(RowMix::gather(g.num_patches(), &pixel_slot)))?;
    let rep = tape.transpose(rep)?;
    let rep = tape.reshape(rep, &[classes, h, w])?;
    let mut inside = vec![0.0; h * w];
    for (i, v) in inside.iter_mut().enumerate() {
        if layout.shared[layout.index_map[pixel_slot[i]]].is_some() {
            *v = 1.0;
        }
    }
    let keep: Vec<f64> = inside.iter().map(|v| 1.0 - v).collect();
    let inside = tape.constant(&[classes, h, w], inside.repeat(classes))?;
    let keep = tape.constant(&[classes, h, w], keep.repeat(classes))?;
    let a = tape.mul(up, keep)?;
    let b = tape.mul(rep, inside)?;
    tape.add(a, b)
}

/// Class scores `[C, H, W]` for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
}

impl SegPrediction {
    /// Per-pixel argmax; ties go to the lower class id.
    pub fn argmax(&self) -> SegMask {
        let plane = self.height * self.width;
        let labels = (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.logits[c * plane + i] > self.logits[best * plane + i] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        SegMask {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Where sharing policies come from.
#[derive(Debug, Clone)]
pub enum PolicySource {
    /// Top-S of the ground-truth single-class grid.
    Oracle,
    /// Top-S of a trained policy network's scores.
    Net(Box<PolicyNet>),
    /// Uniformly random superpatches.
    Random { seed: u64 },
}

impl PolicySource {
    pub fn name(&self) -> String {
        match self {
            PolicySource::Oracle => "oracle".into(),
            PolicySource::Net(_) => "net".into(),
            PolicySource::Random { seed } => format!("random:{seed}"),
        }
    }

    /// Policy sharing `s` superpatches of `sample`. `draw` varies random
    /// draws across training iterations; evaluation uses `draw = 0`.
    pub fn policy(&self, sample: &Sample, s: usize, patch_size: usize, draw: u64) -> Result<SharingPolicy> {
        let (rows, cols) = sample.mask.superpatch_grid(patch_size)?;
        if s == 0 {
            return Ok(SharingPolicy::none(rows, cols));
        }
        match self {
            PolicySource::Oracle => select_top_s(&gt_policy(&sample.mask, patch_size)?.as_scores(), s),
            PolicySource::Net(net) => select_top_s(&net.scores(&sample.image)?, s),
            PolicySource::Random { seed } => {
                let mix = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add((sample.index as u64) << 20)
                    .wrapping_add(draw);
                let mut rng = ChaCha8Rng::seed_from_u64(mix);
                random_policy(rows, cols, s, &mut rng)
            }
        }
    }
}

/// Trains a segmenter on tokens shared by `source` at setting `s`.
pub fn train_segmenter(
    dataset: &Dataset,
    source: &PolicySource,
    s: usize,
    config: &SegConfig,
) -> Result<(SegModel, TrainLog)> {
    if dataset.is_empty() {
        return Err(config_err!("cannot train the segmenter on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let mut model = SegModel::init(config.clone())?;
    let (rows, cols) = model.superpatch_grid();
    if s > rows * cols {
        return Err(config_err!("share setting {s} exceeds {} superpatches", rows * cols));
    }
    let p = config.vit.patch_size;
    // Deterministic sources are resolved once.
    let fixed: Option<Vec<SharingPolicy>> = match source {
        PolicySource::Random { .. } => None,
        _ => Some(
            dataset
                .samples
                .iter()
                .map(|smp| source.policy(smp, s, p, 0))
                .collect::<Result<_>>()?,
        ),
    };
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    let total_iters = config.iterations.max(1) as f64;
    for it in 0..config.iterations {
        let mut total = 0.0;
        for b in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let sample = &dataset.samples[i];
            let policy = match &fixed {
                Some(p) => p[i].clone(),
                None => source.policy(sample, s, p, (it * config.batch_size + b) as u64 + 1)?,
            };
            total += model.loss_and_grad(sample, &policy)?;
        }
        let inv = 1.0 / config.batch_size as f64;
        for t in model.params.tensors_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|v| v * inv).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g)?;
            }
        }
        // linear decay to 10% of the base rate
        opt.lr = config.lr * (1.0 - 0.9 * it as f64 / total_iters);
        opt.step(&mut model.params);
        log.losses.push(total * inv);
    }
    Ok((model, log))
}
