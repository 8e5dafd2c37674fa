//! Pre-norm ViT encoder with pure global multi-head self-attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 2,
            patch_size: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(config_err!("ViT sizes must be positive: {self:?}"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(config_err!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim,
                self.heads
            ));
        }
        if self.patch_size == 0 {
            return Err(config_err!("patch size must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Parameter handles for the patch embedding and encoder.
#[derive(Debug, Clone)]
pub struct Vit {
    pub config: ViTConfig,
    pub num_patches: usize,
    pub patch_proj: ParamId,
    pub patch_bias: ParamId,
    pub pos_table: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

impl Vit {
    /// Registers freshly initialized parameters under `prefix`: scaled
    /// normal weights (std 0.02), zero biases, identity layer norms.
    pub fn init(
        config: ViTConfig,
        num_patches: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let hid = config.hidden_dim();
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}{name}"), t);
        let patch_proj = add("patch_proj", normal(&[patch_dim, e], INIT_STD, rng));
        let patch_bias = add("patch_bias", Tensor::zeros(&[e]));
        let pos_table = add("pos_table", normal(&[num_patches, e], INIT_STD, rng));
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let b = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockParams {
                ln1_g: add(&b("ln1.g"), Tensor::full(&[e], 1.0)),
                ln1_b: add(&b("ln1.b"), Tensor::zeros(&[e])),
                qkv_w: add(&b("qkv.w"), normal(&[e, 3 * e], INIT_STD, rng)),
                qkv_b: add(&b("qkv.b"), Tensor::zeros(&[3 * e])),
                proj_w: add(&b("proj.w"), normal(&[e, e], INIT_STD, rng)),
                proj_b: add(&b("proj.b"), Tensor::zeros(&[e])),
                ln2_g: add(&b("ln2.g"), Tensor::full(&[e], 1.0)),
                ln2_b: add(&b("ln2.b"), Tensor::zeros(&[e])),
                fc1_w: add(&b("fc1.w"), normal(&[e, hid], INIT_STD, rng)),
                fc1_b: add(&b("fc1.b"), Tensor::zeros(&[hid])),
                fc2_w: add(&b("fc2.w"), normal(&[hid, e], INIT_STD, rng)),
                fc2_b: add(&b("fc2.b"), Tensor::zeros(&[e])),
            });
        }
        let norm_g = add("norm.g", Tensor::full(&[e], 1.0));
        let norm_b = add("norm.b", Tensor::zeros(&[e]));
        Ok(Self {
            config,
            num_patches,
            patch_proj,
            patch_bias,
            pos_table,
            blocks,
            norm_g,
            norm_b,
        })
    }
}

/// Output of [`vit_forward`].
#[derive(Debug, Clone)]
pub struct VitOutput {
    /// `[M, E]`, after the final layer norm.
    pub tokens: Var,
    /// Attention weights `[M, M]`, indexed `[block][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// One pre-norm block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    blk: &BlockParams,
    config: &ViTConfig,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let e = config.embed_dim;
    let dh = config.head_dim();
    let h = tape.layer_norm(x, bound[blk.ln1_g], bound[blk.ln1_b], LN_EPS)?;
    let qkv = tape.matmul(h, bound[blk.qkv_w])?;
    let qkv = tape.add_row_bias(qkv, bound[blk.qkv_b])?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    let mut attn = Vec::with_capacity(config.heads);
    for hd in 0..config.heads {
        let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
        let k = tape.slice_cols(qkv, e + hd * dh, e + (hd + 1) * dh)?;
        let v = tape.slice_cols(qkv, 2 * e + hd * dh, 2 * e + (hd + 1) * dh)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax(logits, 1)?;
        attn.push(a);
        heads.push(tape.matmul(a, v)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let o = tape.matmul(merged, bound[blk.proj_w])?;
    let o = tape.add_row_bias(o, bound[blk.proj_b])?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, bound[blk.ln2_g], bound[blk.ln2_b], LN_EPS)?;
    let h = tape.matmul(h, bound[blk.fc1_w])?;
    let h = tape.add_row_bias(h, bound[blk.fc1_b])?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, bound[blk.fc2_w])?;
    let h = tape.add_row_bias(h, bound[blk.fc2_b])?;
    Ok((tape.add(x, h)?, attn))
}

/// Runs the encoder on `[M, E]` tokens. Token count is preserved.
pub fn vit_forward(tape: &mut Tape, bound: &Bound, vit: &Vit, tokens: Var) -> Result<VitOutput> {
    match *tape.shape(tokens) {
        [_, e] if e == vit.config.embed_dim => {}
        ref s => {
            return Err(dim_err!(
                "ViT expects [M,{}] tokens, got {s:?}",
                vit.config.embed_dim
            ))
        }
    }
    let mut x = tokens;
    let mut attention = Vec::with_capacity(vit.blocks.len());
    for blk in &vit.blocks {
        let (y, a) = block_forward(tape, bound, blk, &vit.config, x)?;
        x = y;
        attention.push(a);
    }
    let tokens = tape.layer_norm(x, bound[vit.norm_g], bound[vit.norm_b], LN_EPS)?;
    Ok(VitOutput { tokens, attention })
}
