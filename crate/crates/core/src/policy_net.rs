//! Lightweight class-agnostic CNN predicting, per superpatch, whether it
//! holds a single class.
//!
//! Body: a stack of 3×3 conv + GELU stages; the last `log2(2P)` stages use
//! stride 2 so one output cell covers one superpatch. Head: 1×1 conv to two
//! logits (`0` = multi-class, `1` = single-class), zero-initialized.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Image};
use crate::error::{config_err, dim_err, Result};
use crate::optim::Sgd;
use crate::params::{Bound, ParamId, ParamStore};
use crate::policy::{gt_policy, PolicyScores};
use crate::tensor::Tensor;
use crate::vit::normal;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetConfig {
    pub widths: Vec<usize>,
    pub patch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PolicyNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            patch_size: 4,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 300,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl PolicyNetConfig {
    /// Number of stride-2 stages, `log2(2P)`.
    pub fn downsample_stages(&self) -> Result<usize> {
        let factor = 2 * self.patch_size;
        if !factor.is_power_of_two() {
            return Err(config_err!("2·patch_size = {factor} must be a power of two"));
        }
        let n = factor.trailing_zeros() as usize;
        if n > self.widths.len() {
            return Err(config_err!(
                "{} conv stages cannot downsample by {factor}",
                self.widths.len()
            ));
        }
        Ok(n)
    }

    pub fn strides(&self) -> Result<Vec<usize>> {
        let down = self.downsample_stages()?;
        let n = self.widths.len();
        Ok((0..n).map(|i| if i + down >= n { 2 } else { 1 }).collect())
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub config: PolicyNetConfig,
    pub params: ParamStore,
    convs: Vec<(ParamId, ParamId, usize)>,
    head_w: ParamId,
    head_b: ParamId,
}

impl PolicyNet {
    pub fn init(config: PolicyNetConfig) -> Result<Self> {
        let strides = config.strides()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut c_in = Image::CHANNELS;
        for (i, (&w, &stride)) in config.widths.iter().zip(&strides).enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let k = params.add(format!("conv{i}.w"), normal(&[w, c_in, 3, 3], std, &mut rng));
            let b = params.add(format!("conv{i}.b"), Tensor::zeros(&[w]));
            convs.push((k, b, stride));
            c_in = w;
        }
        let head_w = params.add("head.w", Tensor::zeros(&[2, c_in, 1, 1]));
        let head_b = params.add("head.b", Tensor::zeros(&[2]));
        Ok(Self {
            config,
            params,
            convs,
            head_w,
            head_b,
        })
    }

    /// Two-class logits `[2, H/2P, W/2P]` for a `[3,H,W]` image var.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        let (h, w) = match *tape.shape(image) {
            [3, h, w] => (h, w),
            ref s => return Err(dim_err!("policy net expects [3,H,W], got {s:?}")),
        };
        let side = 2 * self.config.patch_size;
        if h % side != 0 || w % side != 0 {
            return Err(dim_err!("{h}x{w} image is not a whole number of {side}px superpatches"));
        }
        let mut x = image;
        for &(k, b, stride) in &self.convs {
            x = tape.conv2d(x, bound[k], stride, 1)?;
            x = tape.add_channel_bias(x, bound[b])?;
            x = tape.gelu(x);
        }
        let logits = tape.conv2d(x, bound[self.head_w], 1, 0)?;
        let logits = tape.add_channel_bias(logits, bound[self.head_b])?;
        debug_assert_eq!(tape.shape(logits), [2, h / side, w / side]);
        Ok(logits)
    }

    fn input(tape: &mut Tape, image: &Image) -> Result<Var> {
        let centered = image.data.iter().map(|v| v - 0.5).collect();
        tape.constant(&[3, image.height, image.width], centered)
    }

    /// Probability that each superpatch is single-class.
    pub fn scores(&self, image: &Image) -> Result<PolicyScores> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = Self::input(&mut tape, image)?;
        let logits = self.forward(&mut tape, &bound, x)?;
        let probs = tape.softmax(logits, 0)?;
        let shape = tape.shape(probs).to_vec();
        let cells = shape[1] * shape[2];
        Ok(PolicyScores {
            rows: shape[1],
            cols: shape[2],
            scores: tape.value(probs)[cells..].to_vec(),
        })
    }

    /// Mean two-class cross-entropy on one image; adds grads into params.
    pub fn loss_and_grad(&mut self, image: &Image, target: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = Self::input(&mut tape, image)?;
        let logits = self.forward(&mut tape, &bound, x)?;
        let cells = tape.shape(logits)[1] * tape.shape(logits)[2];
        let flat = tape.reshape(logits, &[2, cells])?;
        let rows = tape.transpose(flat)?;
        let loss = tape.cross_entropy(rows, target)?;
        let grads = tape.backward(loss)?;
        self.params.accumulate(&grads, &bound)?;
        Ok(tape.value(loss)[0])
    }

    /// Multiply-accumulate count ×2 for one `h×w` image.
    pub fn flops(&self, height: usize, width: usize) -> Result<u64> {
        let strides = self.config.strides()?;
        let (mut h, mut w, mut c_in) = (height, width, Image::CHANNELS);
        let mut total = 0u64;
        for (&c_out, &s) in self.config.widths.iter().zip(&strides) {
            h = (h + 2 - 3) / s + 1;
            w = (w + 2 - 3) / s + 1;
            total += 2 * (c_out * c_in * 9 * h * w) as u64;
            c_in = c_out;
        }
        Ok(total + 2 * (2 * c_in * h * w) as u64)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(config: PolicyNetConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut net = Self::init(config)?;
        net.params.load(path)?;
        Ok(net)
    }
}

/// Per-iteration mean batch loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `k` iterations.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Trains against per-superpatch ground truth with momentum SGD.
pub fn train_policy(dataset: &Dataset, config: &PolicyNetConfig) -> Result<(PolicyNet, TrainLog)> {
    if dataset.is_empty() {
        return Err(config_err!("cannot train the policy on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let targets: Vec<Vec<usize>> = dataset
        .samples
        .iter()
        .map(|s| {
            gt_policy(&s.mask, config.patch_size)
                .map(|gt| gt.grid.iter().map(|&g| usize::from(g)).collect())
        })
        .collect::<Result<_>>()?;
    let mut net = PolicyNet::init(config.clone())?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    for _ in 0..config.iterations {
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            total += net.loss_and_grad(&dataset.samples[i].image, &targets[i])?;
        }
        let inv = 1.0 / config.batch_size as f64;
        for t in net.params.tensors_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|v| v * inv).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g)?;
            }
        }
        opt.step(&mut net.params);
        log.losses.push(total * inv);
    }
    Ok((net, log))
}
