//! Independent oracles shared by the integration tests. Nothing here calls
//! into the kernels it is used to check.
#![allow(dead_code, clippy::needless_range_loop)]

use cts::autodiff::{Tape, Var};
use cts::data::SegMask;
use cts::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central-difference gradient check.
///
/// `build` maps leaf vars (one per input, in order) to a scalar loss. The
/// loss is re-evaluated on fresh tapes with each input element shifted by
/// `±step`. Returns the largest relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check(
    inputs: &[Tensor],
    step: f64,
    floor: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[0]
    };
    let with_grad: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = with_grad.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("every input reachable").to_vec();
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

/// `Σ out ⊙ w` with fixed random weights, so every output element gets a
/// distinct, O(1) upstream gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let n = tape.value(out).len();
    let mut r = rng(seed ^ 0xabcdef);
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant(&shape, w).unwrap();
    let p = tape.mul(out, wv).unwrap();
    tape.sum(p)
}

pub fn brute_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(&[i, t]) * b.at(&[t, j]);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn brute_conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            let ix = (xx * stride + kx) as isize - padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.at(&[c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Direct bilinear interpolation at half-pixel centers, one output sample
/// at a time.
pub fn brute_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let sample = |ch: usize, sy: f64, sx: f64| {
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        (1.0 - fy) * ((1.0 - fx) * x.at(&[ch, y0, x0]) + fx * x.at(&[ch, y0, x1]))
            + fy * ((1.0 - fx) * x.at(&[ch, y1, x0]) + fx * x.at(&[ch, y1, x1]))
    };
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let sx = (xx as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        sample(ch, sy, sx)
    })
}

/// Distinct-class count per `2p × 2p` square, raster order.
pub fn brute_single_class(mask: &SegMask, patch_size: usize) -> Vec<bool> {
    let side = 2 * patch_size;
    let mut out = Vec::new();
    for r in 0..mask.height / side {
        for c in 0..mask.width / side {
            let mut seen = std::collections::BTreeSet::new();
            for y in 0..side {
                for x in 0..side {
                    seen.insert(mask.labels[(r * side + y) * mask.width + c * side + x]);
                }
            }
            out.push(seen.len() == 1);
        }
    }
    out
}

/// Per-class IoU from explicit pixel sets.
pub fn set_miou(preds: &[SegMask], gts: &[SegMask], classes: usize) -> f64 {
    use std::collections::HashSet;
    let mut ious = Vec::new();
    for k in 0..classes as u16 {
        let mut p = HashSet::new();
        let mut g = HashSet::new();
        for (img, (pm, gm)) in preds.iter().zip(gts).enumerate() {
            for i in 0..pm.labels.len() {
                if pm.labels[i] == k {
                    p.insert((img, i));
                }
                if gm.labels[i] == k {
                    g.insert((img, i));
                }
            }
        }
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// [`grad_check`] over every scalar of a parameter store.
pub fn grad_check_store(
    store: &cts::params::ParamStore,
    step: f64,
    floor: f64,
    build: impl Fn(&mut Tape, &cts::params::Bound) -> Var,
) -> f64 {
    let eval = |s: &cts::params::ParamStore| {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let loss = build(&mut tape, &bound);
        tape.value(loss)[0]
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound);
    let grads = tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        // an unreached parameter has zero gradient; differences confirm it
        let analytic = grads
            .get(bound[id])
            .map_or_else(|| vec![0.0; store.get(id).len()], <[f64]>::to_vec);
        for i in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += step;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for relative error, so exact zeros compare sanely.
pub const REL_FLOOR: f64 = 1e-6;

pub type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable op (or small composite) under gradient check.
pub struct OpCase {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub build: BuildFn,
}

fn case(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name: name.to_string(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape op, each feeding a weighted sum (or being a
/// scalar loss itself). Shapes stay at or under 64 elements per input.
pub fn op_cases() -> Vec<OpCase> {
    use std::sync::Arc;
    let mut v = vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, x| {
            let y = t.matmul(x[0], x[1]).unwrap();
            weighted_sum(t, y, 1)
        }),
        case("transpose", &[&[3, 4]], |t, x| {
            let y = t.transpose(x[0]).unwrap();
            weighted_sum(t, y, 2)
        }),
        case("reshape", &[&[2, 6]], |t, x| {
            let y = t.reshape(x[0], &[3, 4]).unwrap();
            weighted_sum(t, y, 3)
        }),
        case("add", &[&[3, 3], &[3, 3]], |t, x| {
            let y = t.add(x[0], x[1]).unwrap();
            weighted_sum(t, y, 4)
        }),
        case("sub", &[&[3, 3], &[3, 3]], |t, x| {
            let y = t.sub(x[0], x[1]).unwrap();
            weighted_sum(t, y, 5)
        }),
        case("mul", &[&[3, 3], &[3, 3]], |t, x| {
            let y = t.mul(x[0], x[1]).unwrap();
            weighted_sum(t, y, 6)
        }),
        case("scale", &[&[2, 5]], |t, x| {
            let y = t.scale(x[0], -1.7);
            weighted_sum(t, y, 7)
        }),
        case("gelu", &[&[4, 4]], |t, x| {
            let y = t.gelu(x[0]);
            weighted_sum(t, y, 8)
        }),
        case("add_row_bias", &[&[4, 3], &[3]], |t, x| {
            let y = t.add_row_bias(x[0], x[1]).unwrap();
            weighted_sum(t, y, 9)
        }),
        case("add_channel_bias", &[&[3, 2, 2], &[3]], |t, x| {
            let y = t.add_channel_bias(x[0], x[1]).unwrap();
            weighted_sum(t, y, 10)
        }),
        case("layer_norm", &[&[4, 6], &[6], &[6]], |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-6).unwrap();
            weighted_sum(t, y, 12)
        }),
        case("cross_entropy", &[&[5, 4]], |t, x| t.cross_entropy(x[0], &[0, 3, 1, 1, 2]).unwrap()),
        case("sum", &[&[3, 2]], |t, x| t.sum(x[0])),
        case("mean", &[&[3, 2]], |t, x| t.mean(x[0])),
        case("slice_cols", &[&[3, 6]], |t, x| {
            let y = t.slice_cols(x[0], 1, 4).unwrap();
            weighted_sum(t, y, 16)
        }),
        case("concat_cols", &[&[3, 2], &[3, 3]], |t, x| {
            let y = t.concat_cols(&[x[0], x[1]]).unwrap();
            weighted_sum(t, y, 17)
        }),
        case("conv→resize→softmax→CE", &[&[3, 4, 4], &[4, 3, 3, 3], &[4]], |t, x| {
            let c = t.conv2d(x[0], x[1], 1, 1).unwrap();
            let c = t.add_channel_bias(c, x[2]).unwrap();
            let c = t.gelu(c);
            let up = t.bilinear_resize(c, 8, 8).unwrap();
            let flat = t.reshape(up, &[4, 64]).unwrap();
            let rows = t.transpose(flat).unwrap();
            let p = t.softmax(rows, 1).unwrap();
            let lp = weighted_sum(t, p, 18);
            let targets: Vec<usize> = (0..64).map(|i| (i * 7) % 4).collect();
            let ce = t.cross_entropy(rows, &targets).unwrap();
            t.add(ce, lp).unwrap()
        }),
    ];
    for axis in 0..2 {
        v.push(case(&format!("softmax axis {axis}"), &[&[3, 5]], move |t, x| {
            let y = t.softmax(x[0], axis).unwrap();
            weighted_sum(t, y, 11)
        }));
    }
    for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)] {
        v.push(case(&format!("conv2d s{stride} p{padding} k{k}"), &[&[2, 5, 5], &[3, 2, k, k]], move |t, x| {
            let y = t.conv2d(x[0], x[1], stride, padding).unwrap();
            weighted_sum(t, y, 13)
        }));
    }
    for (oh, ow) in [(2, 2), (8, 8), (3, 7), (1, 1)] {
        v.push(case(&format!("bilinear_resize {oh}x{ow}"), &[&[2, 4, 4]], move |t, x| {
            let y = t.bilinear_resize(x[0], oh, ow).unwrap();
            weighted_sum(t, y, 14)
        }));
    }
    let mix = Arc::new(cts::autodiff::RowMix {
        in_rows: 3,
        rows: vec![vec![(0, 0.5), (2, 0.25)], vec![(1, 1.0)], vec![], vec![(2, -2.0), (0, 1.0)]],
    });
    v.push(case("row_mix", &[&[3, 4]], move |t, x| {
        let y = t.row_mix(x[0], mix.clone()).unwrap();
        weighted_sum(t, y, 15)
    }));
    v
}

/// Worst relative error of `case` over `seeds` random draws.
pub fn check_case(case: &OpCase, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let mut r = rng(seed);
            let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
            grad_check(&inputs, FD_STEP, REL_FLOOR, &case.build)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error over every parameter and the input of one
/// pre-norm ViT block with scrambled parameters (E = 8).
pub fn check_vit_block(seed: u64) -> f64 {
    use cts::params::ParamStore;
    use cts::vit::{block_forward, ViTConfig, Vit};
    let config = ViTConfig {
        depth: 1,
        heads: 2,
        embed_dim: 8,
        mlp_ratio: 2,
        patch_size: 2,
    };
    let mut store = ParamStore::new();
    let vit = Vit::init(config, 5, &mut store, "vit.", &mut rng(seed)).unwrap();
    let mut r = rng(seed + 40);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
    let x = random_tensor(&[5, 8], &mut rng(seed + 50));
    let blk = vit.blocks[0];
    let params = grad_check_store(&store, FD_STEP, REL_FLOOR, |t, bound| {
        let v = t.constant(&[5, 8], x.data().to_vec()).unwrap();
        let (y, _) = block_forward(t, bound, &blk, &config, v).unwrap();
        weighted_sum(t, y, seed)
    });
    let input = grad_check(std::slice::from_ref(&x), FD_STEP, REL_FLOOR, |t, v| {
        let bound = store.bind(t);
        let (y, _) = block_forward(t, &bound, &blk, &config, v[0]).unwrap();
        weighted_sum(t, y, seed)
    });
    params.max(input)
}
