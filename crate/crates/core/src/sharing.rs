//! Patch partitioning and the token sharing / unsharing transforms.
//!
//! Tokens are ordered by the raster position of their first patch slot: an
//! unshared patch sits at its own slot, a shared superpatch at its top-left
//! slot. [`TokenLayout::index_map`] maps each of the N patch slots back to
//! the token that represents it.

use std::sync::Arc;

use crate::autodiff::{RowMix, Tape, Var};
use crate::data::Image;
use crate::error::{config_err, dim_err, Result};
use crate::kernels::AxisTaps;
use crate::policy::SharingPolicy;

/// Patch geometry of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeom {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

impl GridGeom {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(config_err!(
                "{height}x{width} image is not divisible into {patch_size}x{patch_size} patches"
            ));
        }
        Ok(Self {
            height,
            width,
            patch_size,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Values per patch vector, `3·P·P`.
    pub fn patch_dim(&self) -> usize {
        Image::CHANNELS * self.patch_size * self.patch_size
    }

    pub fn superpatch_grid(&self) -> Result<(usize, usize)> {
        if !self.grid_h().is_multiple_of(2) || !self.grid_w().is_multiple_of(2) {
            return Err(config_err!(
                "{}x{} patch grid cannot be tiled by 2x2 superpatches",
                self.grid_h(),
                self.grid_w()
            ));
        }
        Ok((self.grid_h() / 2, self.grid_w() / 2))
    }

    /// Flat pixel index into a `[3,H,W]` buffer.
    fn pixel(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

/// The N patch vectors of an image, row-major over the patch grid; each
/// vector is the `[3,P,P]` block flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub geom: GridGeom,
    pub patches: Vec<Vec<f64>>,
}

pub fn partition(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    let geom = GridGeom::new(image.height, image.width, patch_size)?;
    let patches = (0..geom.num_patches())
        .map(|slot| patch_pixel_indices(&geom, slot).map(|i| image.data[i]).collect())
        .collect();
    Ok(PatchGrid { geom, patches })
}

pub fn reassemble(grid: &PatchGrid) -> Image {
    let g = grid.geom;
    let mut data = vec![0.0; Image::CHANNELS * g.height * g.width];
    for (slot, patch) in grid.patches.iter().enumerate() {
        for (v, i) in patch.iter().zip(patch_pixel_indices(&g, slot)) {
            data[i] = *v;
        }
    }
    Image {
        height: g.height,
        width: g.width,
        data,
    }
}

fn patch_pixel_indices(g: &GridGeom, slot: usize) -> impl Iterator<Item = usize> + '_ {
    let p = g.patch_size;
    let (py, px) = (slot / g.grid_w() * p, slot % g.grid_w() * p);
    (0..Image::CHANNELS).flat_map(move |c| {
        (0..p).flat_map(move |dy| (0..p).map(move |dx| g.pixel(c, py + dy, px + dx)))
    })
}

/// Token bookkeeping derived from a policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub geom: GridGeom,
    /// For each of the N patch slots, the token index that represents it.
    pub index_map: Vec<usize>,
    /// Per token: `Some((row, col))` of its superpatch when shared.
    pub shared: Vec<Option<(usize, usize)>>,
    /// Per token: the patch slots it covers (4 when shared, else 1).
    pub slots: Vec<Vec<usize>>,
}

impl TokenLayout {
    pub fn new(geom: GridGeom, policy: &SharingPolicy) -> Result<Self> {
        let (sr, sc) = geom.superpatch_grid()?;
        if (policy.rows, policy.cols) != (sr, sc) {
            return Err(dim_err!(
                "policy grid {}x{} does not match superpatch grid {sr}x{sc}",
                policy.rows,
                policy.cols
            ));
        }
        let gw = geom.grid_w();
        let n = geom.num_patches();
        let mut index_map = vec![usize::MAX; n];
        let mut shared = Vec::new();
        let mut slots = Vec::new();
        for slot in 0..n {
            if index_map[slot] != usize::MAX {
                continue;
            }
            let (gy, gx) = (slot / gw, slot % gw);
            let token = shared.len();
            if policy.is_shared(gy / 2, gx / 2) {
                let cover = vec![slot, slot + 1, slot + gw, slot + gw + 1];
                for &s in &cover {
                    index_map[s] = token;
                }
                shared.push(Some((gy / 2, gx / 2)));
                slots.push(cover);
            } else {
                index_map[slot] = token;
                shared.push(None);
                slots.push(vec![slot]);
            }
        }
        Ok(Self {
            geom,
            index_map,
            shared,
            slots,
        })
    }

    /// Token count M = N − 3S.
    pub fn num_tokens(&self) -> usize {
        self.shared.len()
    }

    pub fn num_shared(&self) -> usize {
        self.shared.iter().filter(|s| s.is_some()).count()
    }

    /// Maps the flattened `[3,H,W]` image (as `[3HW, 1]`) to the flattened
    /// `[M, 3P²]` token pixel matrix (as `[M·3P², 1]`). Shared superpatches
    /// are bilinearly downsampled from `2P×2P` to `P×P`.
    pub fn pixel_mix(&self) -> RowMix {
        let g = self.geom;
        let p = g.patch_size;
        let taps = AxisTaps::new(2 * p, p);
        let mut rows = Vec::with_capacity(self.num_tokens() * g.patch_dim());
        for (t, cover) in self.slots.iter().enumerate() {
            let first = cover[0];
            let (py, px) = (first / g.grid_w() * p, first % g.grid_w() * p);
            for c in 0..Image::CHANNELS {
                for dy in 0..p {
                    for dx in 0..p {
                        if self.shared[t].is_none() {
                            rows.push(vec![(g.pixel(c, py + dy, px + dx), 1.0)]);
                            continue;
                        }
                        let mut r = Vec::with_capacity(4);
                        for a in 0..2 {
                            for b in 0..2 {
                                let w = taps.weight[dy][a] * taps.weight[dx][b];
                                if w != 0.0 {
                                    let y = py + taps.index[dy][a];
                                    let x = px + taps.index[dx][b];
                                    r.push((g.pixel(c, y, x), w));
                                }
                            }
                        }
                        rows.push(r);
                    }
                }
            }
        }
        RowMix {
            in_rows: Image::CHANNELS * g.height * g.width,
            rows,
        }
    }

    /// Mixes the `[N, E]` positional table into `[M, E]`: shared tokens get
    /// the mean of their four slot embeddings.
    pub fn pos_mix(&self) -> RowMix {
        RowMix {
            in_rows: self.geom.num_patches(),
            rows: self
                .slots
                .iter()
                .map(|cover| {
                    let w = 1.0 / cover.len() as f64;
                    cover.iter().map(|&s| (s, w)).collect()
                })
                .collect(),
        }
    }

    /// `[M, D] → [N, D]`: each slot copies its token's row.
    pub fn unshare_mix(&self) -> RowMix {
        RowMix::gather(self.num_tokens(), &self.index_map)
    }

    /// Pixel-space sharing t_s without a tape: token patches `[M][3P²]`.
    pub fn share_pixels(&self, image: &Image) -> Result<Vec<Vec<f64>>> {
        let g = self.geom;
        if (image.height, image.width) != (g.height, g.width) {
            return Err(dim_err!(
                "{}x{} image for a {}x{} layout",
                image.height,
                image.width,
                g.height,
                g.width
            ));
        }
        let mix = self.pixel_mix();
        let flat: Vec<f64> = mix
            .rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * image.data[j]).sum())
            .collect();
        Ok(flat.chunks(g.patch_dim()).map(<[f64]>::to_vec).collect())
    }

    /// Pixel-space unsharing of token patches `[M, 3P²]`: shared tokens are
    /// bilinearly upsampled back to `2P×2P` and split over their slots.
    pub fn unshare_pixels(&self, token_pixels: &[Vec<f64>]) -> Result<PatchGrid> {
        let g = self.geom;
        if token_pixels.len() != self.num_tokens() {
            return Err(dim_err!(
                "{} token patches for a layout of {} tokens",
                token_pixels.len(),
                self.num_tokens()
            ));
        }
        let p = g.patch_size;
        let up = AxisTaps::new(p, 2 * p);
        let mut patches = vec![Vec::new(); g.num_patches()];
        for (t, cover) in self.slots.iter().enumerate() {
            let src = &token_pixels[t];
            if src.len() != g.patch_dim() {
                return Err(dim_err!("token patch of length {}, expected {}", src.len(), g.patch_dim()));
            }
            if self.shared[t].is_none() {
                patches[cover[0]] = src.clone();
                continue;
            }
            for (k, &slot) in cover.iter().enumerate() {
                let (oy, ox) = (k / 2 * p, k % 2 * p);
                let mut patch = Vec::with_capacity(g.patch_dim());
                for c in 0..Image::CHANNELS {
                    for dy in 0..p {
                        for dx in 0..p {
                            let [y0, y1] = up.index[oy + dy];
                            let [wy0, wy1] = up.weight[oy + dy];
                            let [x0, x1] = up.index[ox + dx];
                            let [wx0, wx1] = up.weight[ox + dx];
                            let at = |y: usize, x: usize| src[(c * p + y) * p + x];
                            patch.push(
                                wy0 * (wx0 * at(y0, x0) + wx1 * at(y0, x1))
                                    + wy1 * (wx0 * at(y1, x0) + wx1 * at(y1, x1)),
                            );
                        }
                    }
                }
                patches[slot] = patch;
            }
        }
        Ok(PatchGrid { geom: g, patches })
    }
}

/// The reduced token set T′ on a tape.
#[derive(Debug, Clone)]
pub struct TokenSet {
    /// `[M, E]`, projection plus positional embedding.
    pub tokens: Var,
    /// `[M, E]` positional part alone.
    pub pos_embeds: Var,
    pub layout: Arc<TokenLayout>,
}

/// Token sharing t_s. `image` is `[3,H,W]`, `pos_table` is `[N,E]`,
/// `proj` is `[3P², E]` and `proj_bias` is `[E]`; the same projection maps
/// shared and unshared patches.
pub fn share(
    tape: &mut Tape,
    image: Var,
    pos_table: Var,
    layout: Arc<TokenLayout>,
    proj: Var,
    proj_bias: Var,
) -> Result<TokenSet> {
    let g = layout.geom;
    if tape.shape(image) != [Image::CHANNELS, g.height, g.width] {
        return Err(dim_err!(
            "image {:?} does not match layout {}x{}",
            tape.shape(image),
            g.height,
            g.width
        ));
    }
    if tape.shape(proj).first() != Some(&g.patch_dim()) {
        return Err(dim_err!(
            "projection {:?} expects patch vectors of length {}",
            tape.shape(proj),
            g.patch_dim()
        ));
    }
    let m = layout.num_tokens();
    let flat = tape.reshape(image, &[Image::CHANNELS * g.height * g.width, 1])?;
    let mixed = tape.row_mix(flat, Arc::new(layout.pixel_mix()))?;
    let patches = tape.reshape(mixed, &[m, g.patch_dim()])?;
    let projected = tape.matmul(patches, proj)?;
    let projected = tape.add_row_bias(projected, proj_bias)?;
    let pos = tape.row_mix(pos_table, Arc::new(layout.pos_mix()))?;
    let tokens = tape.add(projected, pos)?;
    Ok(TokenSet {
        tokens,
        pos_embeds: pos,
        layout,
    })
}

/// Token unsharing t_u on `[M, D]` backbone outputs, giving `[N, D]` in
/// raster slot order.
pub fn unshare_tokens(tape: &mut Tape, tokens: Var, layout: &TokenLayout) -> Result<Var> {
    if tape.shape(tokens).first() != Some(&layout.num_tokens()) {
        return Err(dim_err!(
            "{:?} tokens for a layout of {} tokens",
            tape.shape(tokens),
            layout.num_tokens()
        ));
    }
    tape.row_mix(tokens, Arc::new(layout.unshare_mix()))
}

/// Token unsharing applied after the decoder: `[M, C] → [N, C]`.
pub fn unshare_predictions(tape: &mut Tape, preds: Var, layout: &TokenLayout) -> Result<Var> {
    unshare_tokens(tape, preds, layout)
}

/// Raster reshape of `[N, E]` into spatial features `[E, H_L, W_L]`.
pub fn to_spatial(tape: &mut Tape, tokens: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    let (n, e) = match *tape.shape(tokens) {
        [n, e] => (n, e),
        ref s => return Err(dim_err!("to_spatial expects [N,E], got {s:?}")),
    };
    if n != grid_h * grid_w {
        return Err(dim_err!("{n} tokens cannot fill a {grid_h}x{grid_w} grid"));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[e, grid_h, grid_w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_and_coverage() {
        let geom = GridGeom::new(16, 16, 2).unwrap(); // 8x8 patches, 4x4 superpatches
        let policy = SharingPolicy::from_indices(4, 4, &[0, 5, 15]).unwrap();
        let layout = TokenLayout::new(geom, &policy).unwrap();
        assert_eq!(layout.num_tokens(), 64 - 9);
        let mut refs = vec![0; layout.num_tokens()];
        for &t in &layout.index_map {
            refs[t] += 1;
        }
        for (t, r) in refs.iter().enumerate() {
            assert_eq!(*r, if layout.shared[t].is_some() { 4 } else { 1 });
        }
        // tokens are ordered by first slot
        let firsts: Vec<usize> = layout.slots.iter().map(|s| s[0]).collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_policy_is_identity_layout() {
        let geom = GridGeom::new(8, 8, 2).unwrap();
        let layout = TokenLayout::new(geom, &SharingPolicy::none(2, 2)).unwrap();
        assert_eq!(layout.index_map, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_policy_rejected() {
        let geom = GridGeom::new(8, 8, 2).unwrap();
        assert!(TokenLayout::new(geom, &SharingPolicy::none(3, 2)).is_err());
    }
}
