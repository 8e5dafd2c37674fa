//! Both decoder pipelines end to end.

mod common;

use common::*;
use cts::autodiff::Tape;
use cts::data::{generate_scene, Dataset, DatasetSpec, Image, SceneSpec};
use cts::error::CtsError;
use cts::eval::scaled_schedule;
use cts::policy::{gt_policy, random_policy, select_top_s, SharingPolicy};
use cts::segmenter::{pixel_cross_entropy, train_segmenter, DecoderKind, PolicySource, SegConfig, SegModel, SegPrediction};
use cts::vit::ViTConfig;
use rand::Rng;

fn tiny(decoder: DecoderKind) -> SegConfig {
    SegConfig {
        vit: ViTConfig {
            depth: 1,
            heads: 2,
            embed_dim: 4,
            mlp_ratio: 2,
            patch_size: 2,
        },
        height: 8,
        width: 8,
        num_classes: 3,
        decoder,
        spatial_hidden: 3,
        ..SegConfig::default()
    }
}

fn scramble(model: &mut SegModel, seed: u64, amp: f64) {
    let mut r = rng(seed);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-amp..amp);
        }
    }
}

fn tiny_scene(seed: u64) -> (Image, cts::data::SegMask) {
    generate_scene(&SceneSpec {
        seed,
        height: 8,
        width: 8,
        num_classes: 3,
        num_shapes: 2,
        noise_amplitude: 0.05,
        patch_size: 2,
    })
    .unwrap()
}

#[test]
fn both_pipelines_pass_gradient_checks() {
    for decoder in [DecoderKind::Linear, DecoderKind::Spatial] {
        for seed in 0..3 {
            let mut model = SegModel::init(tiny(decoder)).unwrap();
            scramble(&mut model, seed, 0.3);
            let (img, mask) = tiny_scene(seed);
            let policy = random_policy(2, 2, 2, &mut rng(seed)).unwrap();
            let err = grad_check_store(&model.params, FD_STEP, REL_FLOOR, |t, bound| {
                let x = model.image_var(t, &img).unwrap();
                let f = model.forward(t, bound, x, &policy).unwrap();
                pixel_cross_entropy(t, f.logits, &mask).unwrap()
            });
            assert!(err < GRAD_TOL, "{decoder:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    for decoder in [DecoderKind::Linear, DecoderKind::Spatial] {
        let mut model = SegModel::init(tiny(decoder)).unwrap();
        scramble(&mut model, 7, 0.3);
        let (img, mask) = tiny_scene(7);
        let policy = random_policy(2, 2, 1, &mut rng(7)).unwrap();
        let sample = cts::data::Sample {
            index: 0,
            spec: SceneSpec::default(),
            image: img,
            mask,
        };
        model.loss_and_grad(&sample, &policy).unwrap();
        for (name, t) in model.params.iter() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no grad buffer"));
            assert!(g.iter().any(|&v| v != 0.0), "{decoder:?}: {name} got zero gradient");
        }
    }
}

#[test]
fn output_shape_for_every_schedule_setting() {
    for decoder in [DecoderKind::Linear, DecoderKind::Spatial] {
        let config = SegConfig {
            decoder,
            ..SegConfig::default()
        };
        let model = SegModel::init(config).unwrap();
        let (img, _) = generate_scene(&SceneSpec::default()).unwrap();
        let mut r = rng(1);
        for s in scaled_schedule(64) {
            let policy = random_policy(8, 8, s, &mut r).unwrap();
            let pred = model.predict(&img, &policy).unwrap();
            assert_eq!(pred.logits.len(), 5 * 64 * 64, "{decoder:?} S={s}");
            assert!(pred.logits.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn eq1_shared_superpatches_are_single_class() {
    let mut model = SegModel::init(SegConfig::default()).unwrap();
    scramble(&mut model, 3, 0.2);
    for seed in 0..20 {
        let (img, mask) = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
        let policy = select_top_s(&gt_policy(&mask, 4).unwrap().as_scores(), 26).unwrap();
        let pred = model.predict(&img, &policy).unwrap();
        let am = pred.argmax();
        for &(r, c) in &policy.ordered_shared {
            let first = am.at(r * 8, c * 8);
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(am.at(r * 8 + y, c * 8 + x), first, "seed {seed} superpatch ({r},{c})");
                }
            }
        }
        // logits, not just argmax, are identical inside each shared superpatch
        let (r, c) = policy.ordered_shared[0];
        let at = |k: usize, y: usize, x: usize| pred.logits[(k * 64 + y) * 64 + x];
        for k in 0..5 {
            assert_eq!(at(k, r * 8, c * 8), at(k, r * 8 + 7, c * 8 + 5));
        }
    }
}

#[test]
fn single_image_overfits() {
    let spec = DatasetSpec {
        count: 1,
        height: 32,
        width: 32,
        num_classes: 3,
        min_shapes: 2,
        max_shapes: 2,
        ..DatasetSpec::default()
    };
    let ds = Dataset::generate(&spec).unwrap();
    let config = SegConfig {
        vit: ViTConfig {
            depth: 2,
            heads: 2,
            embed_dim: 32,
            mlp_ratio: 2,
            patch_size: 4,
        },
        height: 32,
        width: 32,
        num_classes: 3,
        iterations: 150,
        batch_size: 1,
        lr: 3e-3,
        ..SegConfig::default()
    };
    let (model, log) = train_segmenter(&ds, &PolicySource::Oracle, 0, &config).unwrap();
    let pred = model.predict(&ds.samples[0].image, &SharingPolicy::none(4, 4)).unwrap().argmax();
    let acc = pred
        .labels
        .iter()
        .zip(&ds.samples[0].mask.labels)
        .filter(|(a, b)| a == b)
        .count() as f64
        / pred.labels.len() as f64;
    assert!(acc > 0.95, "pixel accuracy {acc}, final loss {}", log.tail_mean(5));
}

#[test]
fn checkpoint_round_trip() {
    for decoder in [DecoderKind::Linear, DecoderKind::Spatial] {
        let mut model = SegModel::init(tiny(decoder)).unwrap();
        scramble(&mut model, 5, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        model.save(&path).unwrap();
        let back = SegModel::load(tiny(decoder), &path).unwrap();
        let (img, _) = tiny_scene(1);
        let policy = random_policy(2, 2, 2, &mut rng(2)).unwrap();
        assert_eq!(model.predict(&img, &policy).unwrap(), back.predict(&img, &policy).unwrap());
        // wrong architecture fails loudly
        let other = if decoder == DecoderKind::Linear { DecoderKind::Spatial } else { DecoderKind::Linear };
        assert!(SegModel::load(tiny(other), &path).is_err());
    }
}

#[test]
fn argmax_ties_go_to_the_lower_class() {
    let pred = SegPrediction {
        num_classes: 3,
        height: 1,
        width: 2,
        logits: vec![0.5, 1.0, 0.5, 2.0, 0.1, 2.0],
    };
    // pixel 0: (0.5, 0.5, 0.1), pixel 1: (1.0, 2.0, 2.0)
    assert_eq!(pred.argmax().labels, vec![0, 1]);
}

#[test]
fn policy_sources() {
    let ds = Dataset::generate(&DatasetSpec { count: 2, ..DatasetSpec::default() }).unwrap();
    let s = &ds.samples[0];
    let rnd = PolicySource::Random { seed: 4 };
    assert_eq!(rnd.policy(s, 10, 4, 0).unwrap(), rnd.policy(s, 10, 4, 0).unwrap());
    assert_ne!(rnd.policy(s, 10, 4, 0).unwrap(), rnd.policy(s, 10, 4, 1).unwrap());
    assert_eq!(PolicySource::Oracle.policy(s, 0, 4, 0).unwrap().num_shared(), 0);
    let gt = gt_policy(&s.mask, 4).unwrap();
    let o = PolicySource::Oracle.policy(s, gt.positives(), 4, 0).unwrap();
    assert!(o.ordered_shared.iter().all(|&(r, c)| gt.grid[r * 8 + c]));
}

#[test]
fn training_errors() {
    let empty = Dataset { samples: vec![] };
    let config = SegConfig::default();
    assert!(matches!(
        train_segmenter(&empty, &PolicySource::Oracle, 0, &config),
        Err(CtsError::Config(_))
    ));
    let ds = Dataset::generate(&DatasetSpec { count: 1, ..DatasetSpec::default() }).unwrap();
    assert!(matches!(
        train_segmenter(&ds, &PolicySource::Oracle, 65, &config),
        Err(CtsError::Config(_))
    ));
    assert!(SegModel::init(SegConfig { height: 60, ..config.clone() }).is_err());
    let model = SegModel::init(config).unwrap();
    let mut t = Tape::new();
    let small = Image::from_fn(32, 32, |_, _, _| 0.0);
    assert!(model.image_var(&mut t, &small).is_err());
}

#[test]
fn zero_sharing_ignores_the_policy_source() {
    let ds = Dataset::generate(&DatasetSpec { count: 4, height: 8, width: 8, num_classes: 3, patch_size: 2, ..DatasetSpec::default() }).unwrap();
    let config = SegConfig { iterations: 5, batch_size: 2, ..tiny(DecoderKind::Linear) };
    let net = cts::policy_net::PolicyNet::init(cts::policy_net::PolicyNetConfig { patch_size: 2, widths: vec![4, 4], ..Default::default() }).unwrap();
    let runs: Vec<Vec<Vec<f64>>> = [PolicySource::Oracle, PolicySource::Random { seed: 3 }, PolicySource::Net(Box::new(net))]
        .iter()
        .map(|src| {
            let (mut m, log) = train_segmenter(&ds, src, 0, &config).unwrap();
            assert!(log.losses.iter().all(|l| l.is_finite()));
            m.params.tensors_mut().map(|t| t.data().to_vec()).collect()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}
