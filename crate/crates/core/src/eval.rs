//! Metrics, FLOP accounting, throughput measurement, majority-vote
//! consistency and dynamic token sharing evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{Dataset, SegMask};
use crate::error::{config_err, dim_err, usage_err, Result};
use crate::policy::{confident_count, dynamic_select_count, gt_policy, precision, select_top_s, SharingPolicy};
use crate::policy_net::PolicyNet;
use crate::segmenter::{DecoderKind, PolicySource, SegModel};
use crate::sharing::GridGeom;
use crate::vit::ViTConfig;

/// `counts[gt][pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(usage_err!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height,
                pred.width,
                gt.height,
                gt.width
            ));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if p >= c || g >= c {
                return Err(usage_err!("class id {} outside [0,{c})", p.max(g)));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
                let pred: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let c = self.num_classes;
        let tp: u64 = (0..c).map(|k| self.counts[k * c + k]).sum();
        tp as f64 / self.total().max(1) as f64
    }
}

/// Dataset-level mIoU from one accumulated confusion matrix.
pub fn miou(preds: &[SegMask], gts: &[SegMask], num_classes: usize) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(usage_err!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    Ok(cm.miou())
}

/// Sets every pixel of each shared superpatch to its modal class (ties go
/// to the lowest class id).
pub fn majority_vote(pred: &SegMask, policy: &SharingPolicy, patch_size: usize) -> Result<SegMask> {
    let (rows, cols) = pred.superpatch_grid(patch_size)?;
    if (rows, cols) != (policy.rows, policy.cols) {
        return Err(dim_err!(
            "policy grid {}x{} vs superpatch grid {rows}x{cols}",
            policy.rows,
            policy.cols
        ));
    }
    let side = 2 * patch_size;
    let mut out = pred.clone();
    let mut hist: BTreeMap<u16, usize> = BTreeMap::new();
    for &(r, c) in &policy.ordered_shared {
        hist.clear();
        for y in r * side..(r + 1) * side {
            for x in c * side..(c + 1) * side {
                *hist.entry(pred.at(y, x)).or_default() += 1;
            }
        }
        // BTreeMap iterates ascending, so the first maximum is the lowest id.
        let mut mode = (0u16, 0usize);
        for (&class, &n) in &hist {
            if n > mode.1 {
                mode = (class, n);
            }
        }
        for y in r * side..(r + 1) * side {
            out.labels[y * pred.width + c * side..][..side].fill(mode.0);
        }
    }
    Ok(out)
}

/// FLOP breakdown for one image; every multiply-accumulate counts as two
/// FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopBreakdown {
    /// QKV and output projections plus both attention matmuls, all blocks.
    pub attention: u64,
    /// The `M²` part of `attention` alone.
    pub attention_quadratic: u64,
    pub mlp: u64,
    pub projection: u64,
    pub decoder: u64,
    pub policy: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.attention + self.mlp + self.projection + self.decoder + self.policy
    }
}

/// Analytic FLOPs of the backbone on `m` tokens. `decoder` and `policy`
/// are supplied by the caller (zero when not applicable).
pub fn flop_model(config: &ViTConfig, m: usize, decoder: u64, policy: Option<u64>) -> FlopBreakdown {
    let (m, e, d) = (m as u64, config.embed_dim as u64, config.depth as u64);
    let hidden = config.mlp_ratio as u64 * e;
    let patch_dim = 3 * (config.patch_size * config.patch_size) as u64;
    let quad = 2 * (2 * m * m * e);
    FlopBreakdown {
        attention: d * (2 * (4 * m * e * e) + quad),
        attention_quadratic: d * quad,
        mlp: d * 2 * (2 * m * e * hidden),
        projection: 2 * m * patch_dim * e,
        decoder,
        policy: policy.unwrap_or(0),
    }
}

/// Decoder FLOPs of a segmentation model; the per-token (eq1) linear head runs on M
/// tokens, the spatial (eq2) conv head on the full N-cell grid.
pub fn decoder_flops(model: &SegModel, m: usize) -> u64 {
    let c = model.config.num_classes as u64;
    let e = model.config.vit.embed_dim as u64;
    match model.config.decoder {
        DecoderKind::Linear => 2 * m as u64 * e * c,
        DecoderKind::Spatial => {
            let n = model.geom().num_patches() as u64;
            let h = model.config.spatial_hidden as u64;
            2 * n * (9 * e * h + 9 * h * h + h * c)
        }
    }
}

/// One row of a cost report over the sharing schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub n: usize,
    pub s: usize,
    pub m: usize,
    pub token_reduction: f64,
    pub flops: FlopBreakdown,
    pub images_per_sec: Option<f64>,
    pub miou: Option<f64>,
}

impl CostReport {
    pub fn new(n: usize, s: usize, flops: FlopBreakdown) -> Result<Self> {
        if 3 * s > n {
            return Err(usage_err!("cannot share {s} superpatches among {n} patches"));
        }
        Ok(Self {
            n,
            s,
            m: n - 3 * s,
            token_reduction: 3.0 * s as f64 / n as f64,
            flops,
            images_per_sec: None,
            miou: None,
        })
    }

    /// Deterministic `key=value` lines; throughput goes on a `# timing` line.
    pub fn kv_lines(&self, prefix: &str) -> String {
        let f = &self.flops;
        let mut s = format!(
            "{prefix}N={} {prefix}S={} {prefix}M={} {prefix}token_reduction={:.6} {prefix}attention_flops={} {prefix}mlp_flops={} {prefix}projection_flops={} {prefix}decoder_flops={} {prefix}policy_flops={} {prefix}total_flops={}",
            self.n, self.s, self.m, self.token_reduction, f.attention, f.mlp, f.projection, f.decoder, f.policy, f.total()
        );
        if let Some(m) = self.miou {
            let _ = write!(s, " {prefix}miou={m:.6}");
        }
        s.push('\n');
        if let Some(ips) = self.images_per_sec {
            let _ = writeln!(s, "# timing {prefix}S={} images_per_sec={ips:.3}", self.s);
        }
        s
    }
}

/// Evaluation of one model under one policy source on a dataset.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<SegMask>,
    pub policies: Vec<SharingPolicy>,
    /// Mean policy precision over images (`None` when S = 0).
    pub policy_precision: Option<f64>,
}

impl EvalResult {
    pub fn miou(&self) -> f64 {
        self.confusion.miou()
    }
}

pub fn evaluate(model: &SegModel, dataset: &Dataset, source: &PolicySource, s: usize) -> Result<EvalResult> {
    evaluate_with_threads(model, dataset, source, s, 1)
}

/// `evaluate` with images split across `threads` workers. Per-image results
/// are reduced in image order, so the output does not depend on `threads`.
pub fn evaluate_with_threads(
    model: &SegModel,
    dataset: &Dataset,
    source: &PolicySource,
    s: usize,
    threads: usize,
) -> Result<EvalResult> {
    let p = model.config.vit.patch_size;
    let one = |sample: &crate::data::Sample| -> Result<(SegMask, SharingPolicy, f64)> {
        let policy = source.policy(sample, s, p, 0)?;
        let pred = model.predict(&sample.image, &policy)?.argmax();
        let prec = if s > 0 {
            precision(&policy, &gt_policy(&sample.mask, p)?)?
        } else {
            0.0
        };
        Ok((pred, policy, prec))
    };
    let threads = threads.clamp(1, dataset.len().max(1));
    let per_image: Vec<(SegMask, SharingPolicy, f64)> = if threads == 1 {
        dataset.samples.iter().map(one).collect::<Result<_>>()?
    } else {
        let chunk = dataset.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = dataset
                .samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(dataset.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, crate::error::CtsError>(all)
        })?
    };
    let mut confusion = ConfusionMatrix::new(model.config.num_classes);
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut policies = Vec::with_capacity(dataset.len());
    let mut prec = 0.0;
    for ((pred, policy, pr), sample) in per_image.into_iter().zip(&dataset.samples) {
        confusion.add(&pred, &sample.mask)?;
        prec += pr;
        predictions.push(pred);
        policies.push(policy);
    }
    Ok(EvalResult {
        confusion,
        predictions,
        policies,
        policy_precision: (s > 0).then(|| prec / dataset.len().max(1) as f64),
    })
}

/// Wall-clock throughput measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub warmup: usize,
    pub iters: usize,
    pub batch: usize,
    pub images_per_sec: f64,
    pub mean_iter_secs: f64,
    pub hardware: String,
}

pub const WARMUP_ITERS: usize = 50;
pub const MEASURED_ITERS: usize = 100;

/// Runs `step` `warmup` times untimed, then `iters` times timed; each call
/// processes `batch` images.
pub fn benchmark(
    batch: usize,
    warmup: usize,
    iters: usize,
    mut step: impl FnMut() -> Result<()>,
) -> Result<BenchResult> {
    if batch == 0 || iters == 0 {
        return Err(usage_err!("benchmark needs at least one image and one iteration"));
    }
    for _ in 0..warmup {
        step()?;
    }
    let t0 = Instant::now();
    for _ in 0..iters {
        step()?;
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(BenchResult {
        warmup,
        iters,
        batch,
        images_per_sec: (batch * iters) as f64 / secs,
        mean_iter_secs: secs / iters as f64,
        hardware: hardware_string(),
    })
}

pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu} ({}, single thread)", std::env::consts::ARCH)
}

/// Full CTS inference for one image: policy network (when given), top-S
/// selection, then the model's pipeline.
pub fn infer_once(
    model: &SegModel,
    policy_net: Option<&PolicyNet>,
    image: &crate::data::Image,
    s: usize,
) -> Result<crate::segmenter::SegPrediction> {
    let (rows, cols) = model.superpatch_grid();
    let policy = match policy_net {
        Some(net) if s > 0 => select_top_s(&net.scores(image)?, s)?,
        _ => SharingPolicy::none(rows, cols),
    };
    model.predict(image, &policy)
}

/// Per-setting row of a dynamic token sharing report.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicRow {
    pub s: usize,
    pub token_reduction: f64,
    pub images: usize,
    /// The setting's own model evaluated on every image with the policy
    /// network at its fixed S.
    pub individual_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicReport {
    pub tau: f64,
    pub rows: Vec<DynamicRow>,
    pub combined_miou: f64,
    pub average_token_reduction: f64,
    pub confusion: ConfusionMatrix,
}

impl DynamicReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# dynamic token sharing, tau={}", self.tau);
        let _ = writeln!(s, "{:>10} {:>6} {:>12} {:>10}", "reduction", "S", "images", "mIoU");
        for r in &self.rows {
            let m = r.individual_miou.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m));
            let _ = writeln!(
                s,
                "{:>9.1}% {:>6} {:>12} {:>10}",
                100.0 * r.token_reduction,
                r.s,
                r.images,
                m
            );
        }
        let total: usize = self.rows.iter().map(|r| r.images).sum();
        let _ = writeln!(s, "{:>17} {:>12} {:>10.2}", "combined", total, 100.0 * self.combined_miou);
        let _ = writeln!(s, "tau={}", self.tau);
        for r in &self.rows {
            let _ = writeln!(s, "images_S{}={}", r.s, r.images);
        }
        let _ = writeln!(s, "combined_miou={:.6}", self.combined_miou);
        let _ = writeln!(s, "average_token_reduction={:.6}", self.average_token_reduction);
        s
    }
}

/// Routes each image to the model with the largest setting `S < S*`, where
/// `S*` counts policy scores above `tau`, and pools all predictions into one
/// confusion matrix.
pub fn dynamic_eval(
    models: &BTreeMap<usize, SegModel>,
    policy_net: &PolicyNet,
    tau: f64,
    dataset: &Dataset,
    with_individual: bool,
) -> Result<DynamicReport> {
    let base = models
        .get(&0)
        .ok_or_else(|| config_err!("dynamic evaluation needs an S=0 model"))?;
    let settings: Vec<usize> = models.keys().copied().collect();
    let n = base.geom().num_patches();
    let num_classes = base.config.num_classes;
    let mut counts: BTreeMap<usize, usize> = settings.iter().map(|&s| (s, 0)).collect();
    let mut confusion = ConfusionMatrix::new(num_classes);
    let mut reduction_sum = 0.0;
    for sample in &dataset.samples {
        let scores = policy_net.scores(&sample.image)?;
        let s = dynamic_select_count(confident_count(&scores, tau), &settings)?;
        let model = &models[&s];
        let policy = select_top_s(&scores, s)?;
        let pred = model.predict(&sample.image, &policy)?.argmax();
        confusion.add(&pred, &sample.mask)?;
        *counts.get_mut(&s).expect("setting exists") += 1;
        reduction_sum += 3.0 * s as f64 / n as f64;
    }
    let net_source = PolicySource::Net(Box::new(policy_net.clone()));
    let mut rows = Vec::with_capacity(settings.len());
    for &s in &settings {
        let individual_miou = if with_individual {
            Some(evaluate(&models[&s], dataset, &net_source, s)?.miou())
        } else {
            None
        };
        rows.push(DynamicRow {
            s,
            token_reduction: 3.0 * s as f64 / n as f64,
            images: counts[&s],
            individual_miou,
        });
    }
    Ok(DynamicReport {
        tau,
        rows,
        combined_miou: confusion.miou(),
        average_token_reduction: reduction_sum / dataset.len().max(1) as f64,
        confusion,
    })
}

/// Desk-scale analog of the reference sharing schedule: each reference
/// row's shared fraction of superpatches applied to `total` superpatches.
pub fn scaled_schedule(total: usize) -> Vec<usize> {
    const REFERENCE: [usize; 10] = [0, 31, 41, 79, 103, 131, 156, 192, 224, 256];
    REFERENCE
        .iter()
        .map(|&s| ((s * total) as f64 / 256.0).round() as usize)
        .collect()
}

/// Setting whose token reduction is closest to `fraction` (ties → smaller S).
pub fn setting_for_reduction(geom: &GridGeom, fraction: f64) -> usize {
    let n = geom.num_patches() as f64;
    let total = geom.num_patches() / 4;
    (0..=total)
        .min_by(|&a, &b| {
            let da = (3.0 * a as f64 / n - fraction).abs();
            let db = (3.0 * b as f64 / n - fraction).abs();
            da.partial_cmp(&db).expect("finite").then(a.cmp(&b))
        })
        .unwrap_or(0)
}
