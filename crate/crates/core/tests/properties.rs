//! Randomized invariants.

mod common;

use common::*;
use cts::autodiff::Tape;
use cts::config::ExperimentConfig;
use cts::data::{Image, SegMask};
use cts::eval::{miou, ConfusionMatrix};
use cts::format;
use cts::kernels::gemm;
use cts::policy::{dynamic_select_count, gt_policy, precision, select_top_s, PolicyScores, SharingPolicy};
use cts::sharing::{reassemble, GridGeom, TokenLayout};
use cts::tensor::Tensor;
use proptest::prelude::*;

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn policy_strategy(rows: usize, cols: usize) -> impl Strategy<Value = SharingPolicy> {
    prop::collection::vec(any::<bool>(), rows * cols).prop_map(move |g| {
        let idx: Vec<usize> = g.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        SharingPolicy::from_indices(rows, cols, &idx).unwrap()
    })
}

fn mask_strategy(h: usize, w: usize, classes: u16) -> impl Strategy<Value = SegMask> {
    prop::collection::vec(0..classes, h * w).prop_map(move |l| SegMask::new(h, w, l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in tensor_strategy(vec![4, 7]), axis in 0usize..2) {
        let mut t = Tape::new();
        let v = t.leaf(&x.clone());
        let s = t.softmax(v, axis).unwrap();
        let y = t.tensor(s);
        let (r, c) = (4, 7);
        let sums: Vec<f64> = if axis == 1 {
            (0..r).map(|i| (0..c).map(|j| y.at(&[i, j])).sum()).collect()
        } else {
            (0..c).map(|j| (0..r).map(|i| y.at(&[i, j])).sum()).collect()
        };
        for s in sums {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_to_same_shape_is_identity(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = random_tensor(&[c, h, w], &mut rng(seed));
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let y = t.bilinear_resize(v, h, w).unwrap();
        prop_assert_eq!(t.value(y), x.data());
    }

    #[test]
    fn resize_matches_direct_interpolation(
        h in 1usize..8, w in 1usize..8, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>()
    ) {
        let x = random_tensor(&[2, h, w], &mut rng(seed));
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let y = t.bilinear_resize(v, oh, ow).unwrap();
        prop_assert!(t.tensor(y).max_abs_diff(&brute_bilinear(&x, oh, ow)) < 1e-12);
    }

    #[test]
    fn conv_matches_nested_loops(
        ci in 1usize..4, co in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 2, 3]), stride in 1usize..3, padding in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&[ci, h, w], &mut r);
        let wt = random_tensor(&[co, ci, k, k], &mut r);
        let mut t = Tape::new();
        let (vx, vw) = (t.leaf(&x), t.leaf(&wt));
        let y = t.conv2d(vx, vw, stride, padding).unwrap();
        prop_assert!(t.tensor(y).max_abs_diff(&brute_conv2d(&x, &wt, stride, padding)) < 1e-12);
    }

    #[test]
    fn gemm_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[m, k], &mut r);
        let b = random_tensor(&[k, n], &mut r);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        let want = brute_matmul(&a, &b);
        for (x, y) in c.iter().zip(want.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn top_s_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(0.0f64..1.0, 16), s in 0usize..=16, a in 0.1f64..5.0, b in -3.0f64..3.0
    ) {
        let base = PolicyScores { rows: 4, cols: 4, scores: scores.clone() };
        let p1 = select_top_s(&base, s).unwrap();
        prop_assert_eq!(p1.num_shared(), s);
        prop_assert_eq!(&p1, &select_top_s(&base, s).unwrap());
        for f in [|v: f64, a: f64, b: f64| a * v + b, |v: f64, a: f64, _| (a * v).exp(), |v: f64, _, b| v.powi(3) + b] {
            let mapped = PolicyScores { rows: 4, cols: 4, scores: scores.iter().map(|&v| f(v, a, b)).collect() };
            let p2 = select_top_s(&mapped, s).unwrap();
            prop_assert_eq!(&p1.share_grid, &p2.share_grid);
        }
    }

    #[test]
    fn oracle_selection_is_perfectly_precise(mask in mask_strategy(16, 16, 2)) {
        let gt = gt_policy(&mask, 2).unwrap();
        for s in 1..=gt.positives() {
            let p = select_top_s(&gt.as_scores(), s).unwrap();
            prop_assert_eq!(precision(&p, &gt).unwrap(), 1.0);
        }
    }

    #[test]
    fn gt_policy_matches_distinct_count(mask in mask_strategy(16, 24, 3), p in prop::sample::select(vec![1usize, 2, 4])) {
        prop_assert_eq!(gt_policy(&mask, p).unwrap().grid, brute_single_class(&mask, p));
    }

    #[test]
    fn dynamic_select_is_strictly_below_s_star(
        s_star in 0usize..80, extra in prop::collection::btree_set(1usize..80, 0..8)
    ) {
        let mut settings = vec![0];
        settings.extend(extra);
        let s = dynamic_select_count(s_star, &settings).unwrap();
        prop_assert!(settings.contains(&s));
        prop_assert!(s == 0 || s < s_star);
        // largest such setting
        prop_assert!(settings.iter().all(|&t| t >= s_star || t <= s));
    }

    #[test]
    fn token_count_is_n_minus_3s(policy in policy_strategy(4, 6)) {
        let g = GridGeom::new(32, 48, 4).unwrap();
        let layout = TokenLayout::new(g, &policy).unwrap();
        prop_assert_eq!(layout.num_tokens(), g.num_patches() - 3 * policy.num_shared());
        // every slot maps to exactly one token that lists it
        for (slot, &tok) in layout.index_map.iter().enumerate() {
            prop_assert!(layout.slots[tok].contains(&slot));
        }
    }

    #[test]
    fn constant_superpatches_round_trip(policy in policy_strategy(3, 3), seed in any::<u64>()) {
        let g = GridGeom::new(24, 24, 4).unwrap();
        let mut r = rng(seed);
        let colors: Vec<[f64; 3]> = (0..9).map(|_| {
            use rand::Rng;
            [r.random(), r.random(), r.random()]
        }).collect();
        let noise = random_tensor(&[3, 24, 24], &mut r);
        // constant inside shared superpatches, arbitrary elsewhere
        let img = Image::from_fn(24, 24, |c, y, x| {
            let sp = (y / 8) * 3 + x / 8;
            if policy.share_grid[sp] { colors[sp][c] } else { noise.at(&[c, y, x]) }
        });
        let layout = TokenLayout::new(g, &policy).unwrap();
        let back = reassemble(&layout.unshare_pixels(&layout.share_pixels(&img).unwrap()).unwrap());
        prop_assert_eq!(back.data, img.data);
    }

    #[test]
    fn confusion_miou_matches_set_oracle(
        preds in prop::collection::vec(mask_strategy(4, 5, 3), 1..4), seed in any::<u64>()
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let gts: Vec<SegMask> = preds.iter().map(|p| {
            SegMask::new(4, 5, (0..20).map(|i| if r.random_bool(0.6) { p.labels[i] } else { r.random_range(0..3) }).collect()).unwrap()
        }).collect();
        prop_assert_eq!(miou(&preds, &gts, 3).unwrap(), set_miou(&preds, &gts, 3));
        let mut cm = ConfusionMatrix::new(3);
        for (p, g) in preds.iter().zip(&gts) {
            cm.add(p, g).unwrap();
        }
        prop_assert_eq!(cm.total(), 20 * preds.len() as u64);
    }

    #[test]
    fn tensor_format_round_trips(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let t = random_tensor(&shape, &mut rng(seed));
        let bytes = format::encode_tensor(&t);
        let (back, used) = format::decode_tensor(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), iters in 1usize..1000, lr in 1e-5f64..1.0, noise in 0.0f64..0.5) {
        let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
        c.seg.iterations = iters;
        c.seg.lr = lr;
        c.dataset.noise_amplitude = noise;
        prop_assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}

