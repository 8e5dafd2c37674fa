//! Command-line front end. Every command writes `report.txt` under its
//! output directory (default `<output_dir>/<name>-<command>`, or
//! `runs/<command>` without a config) and echoes it to stdout.
//!
//! Report layout: `#` header lines, a `[config]` section holding the
//! resolved experiment config, an `[args]` section, then `[results]`.
//! Anything that depends on wall-clock time sits on a `# timing` line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{check_schedule, ExperimentConfig, REPORT_CONFIG_HEADER};
use crate::data::{superpatch_stats, Dataset};
use crate::eval::{
    benchmark, decoder_flops, dynamic_eval, evaluate_with_threads, flop_model, hardware_string, majority_vote,
    miou, CostReport, MEASURED_ITERS, WARMUP_ITERS,
};
use crate::policy::{gt_policy, precision, random_policy, select_top_s};
use crate::policy_net::{train_policy, PolicyNet};
use crate::segmenter::{train_segmenter, DecoderKind, PolicySource, SegModel};

pub const THREADS_ENV: &str = "CTS_THREADS";
const FLOP_CONVENTION: &str = "# flops: 2 FLOPs per multiply-accumulate";

#[derive(Debug, Parser)]
#[command(name = "cts", version, about = "Content-aware token sharing for ViT segmentation")]
pub struct Cli {
    /// Overrides the config seed (model init, batch order).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Report directory; defaults to <output_dir>/<name>-<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; defaults to the config's data_root.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Histogram of single-class superpatch percentages.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        patch_size: usize,
    },
    /// Train the policy network; writes policy.ckpt and a precision report.
    TrainPolicy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a segmenter at one sharing setting; writes seg.ckpt.
    TrainSeg {
        #[arg(long)]
        config: PathBuf,
        /// oracle | net:<ckpt> | random:<seed>
        #[arg(long)]
        policy: String,
        #[arg(long)]
        share: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Validation mIoU and cost report for one checkpoint.
    Eval {
        #[arg(long)]
        seg: PathBuf,
        #[arg(long, default_value = "oracle")]
        policy: String,
        #[arg(long)]
        share: usize,
        /// eq1 | eq2; must match the checkpoint's decoder.
        #[arg(long)]
        path: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Throughput and FLOPs across a sharing schedule.
    Bench {
        #[arg(long)]
        seg: PathBuf,
        /// Comma-separated S values.
        #[arg(long, value_delimiter = ',', required = true)]
        share_schedule: Vec<usize>,
        #[arg(long, default_value = "oracle")]
        policy: String,
        #[arg(long, default_value_t = WARMUP_ITERS)]
        warmup: usize,
        #[arg(long, default_value_t = MEASURED_ITERS)]
        iters: usize,
        /// Repeats per setting; the median is reported.
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dynamic token sharing: route each image by policy confidence.
    Dynamic {
        /// S=ckpt pairs, comma-separated; must include S=0.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
        /// Policy network checkpoint.
        #[arg(long)]
        policy: PathBuf,
        /// One or more thresholds, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        tau: Vec<f64>,
        /// Also evaluate every model at its own fixed setting.
        #[arg(long)]
        individual: bool,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Parsed, validated `--policy` flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Oracle,
    Net(PathBuf),
    Random(u64),
}

impl std::str::FromStr for PolicySpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s.split_once(':') {
            None if s == "oracle" => Ok(PolicySpec::Oracle),
            Some(("net", p)) if !p.is_empty() => Ok(PolicySpec::Net(PathBuf::from(p))),
            Some(("random", seed)) => Ok(PolicySpec::Random(
                seed.parse().with_context(|| format!("bad random policy seed {seed:?}"))?,
            )),
            _ => bail!("policy must be oracle, net:<ckpt> or random:<seed>, got {s:?}"),
        }
    }
}

impl PolicySpec {
    pub fn source(&self) -> anyhow::Result<PolicySource> {
        Ok(match self {
            PolicySpec::Oracle => PolicySource::Oracle,
            PolicySpec::Net(p) => PolicySource::Net(Box::new(load_policy(p)?.0)),
            PolicySpec::Random(seed) => PolicySource::Random { seed: *seed },
        })
    }
}

impl std::fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicySpec::Oracle => write!(f, "oracle"),
            PolicySpec::Net(p) => write!(f, "net:{}", p.display()),
            PolicySpec::Random(s) => write!(f, "random:{s}"),
        }
    }
}

/// Worker count from `CTS_THREADS` (default 1).
pub fn threads_from_env() -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        },
    }
}

fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn read_ckpt_config(ckpt: &Path) -> anyhow::Result<ExperimentConfig> {
    if !ckpt.exists() {
        bail!("checkpoint {} not found", ckpt.display());
    }
    let cfg_path = config_path(ckpt);
    ExperimentConfig::from_file(&cfg_path).with_context(|| format!("reading checkpoint config {}", cfg_path.display()))
}

pub fn load_policy(ckpt: &Path) -> anyhow::Result<(PolicyNet, ExperimentConfig)> {
    let cfg = read_ckpt_config(ckpt)?;
    let net = PolicyNet::load(cfg.policy_config(), ckpt)?;
    Ok((net, cfg))
}

pub fn load_seg(ckpt: &Path) -> anyhow::Result<(SegModel, ExperimentConfig)> {
    let cfg = read_ckpt_config(ckpt)?;
    let model = SegModel::load(cfg.seg_config(), ckpt)?;
    Ok((model, cfg))
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    if !dir.join("manifest.txt").exists() {
        bail!("no dataset at {} (run `cts synth` first)", dir.display());
    }
    let ds = Dataset::load(dir)?;
    if ds.is_empty() {
        bail!("dataset at {} is empty", dir.display());
    }
    Ok(ds)
}

/// Train/validation split described by `cfg`, checked against its geometry.
fn split_dataset(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    let ds = load_dataset(dir)?;
    let first = &ds.samples[0];
    if (first.image.height, first.image.width) != (cfg.dataset.height, cfg.dataset.width) {
        bail!(
            "dataset at {} holds {}x{} images, config expects {}x{}",
            dir.display(),
            first.image.height,
            first.image.width,
            cfg.dataset.height,
            cfg.dataset.width
        );
    }
    if cfg.val_count >= ds.len() {
        bail!("dataset has {} scenes, cannot hold out {}", ds.len(), cfg.val_count);
    }
    Ok(ds.split(cfg.val_count))
}

/// Report text builder.
struct Report {
    text: String,
}

impl Report {
    fn new(command: &str, config: Option<&ExperimentConfig>, args: &[(&str, String)]) -> Self {
        let mut text = format!("# cts {command}\n{FLOP_CONVENTION}\n");
        if let Some(c) = config {
            let _ = write!(text, "{REPORT_CONFIG_HEADER}\n{}", c.to_text());
        }
        text.push_str("[args]\n");
        for (k, v) in args {
            let _ = writeln!(text, "{k}={v}");
        }
        text.push_str("[results]\n");
        Report { text }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        if !self.text.ends_with('\n') {
            self.text.push('\n');
        }
    }

    fn timing(&mut self, s: impl AsRef<str>) {
        self.line(format!("# timing {}", s.as_ref()));
    }

    fn finish(self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("report.txt");
        std::fs::write(&path, &self.text).with_context(|| format!("writing {}", path.display()))?;
        print!("{}", self.text);
        Ok(())
    }
}

fn out_dir(out: &Option<PathBuf>, cfg: Option<&ExperimentConfig>, default_name: &str) -> PathBuf {
    match (out, cfg) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.output_dir.join(format!("{}-{default_name}", c.name)),
        (None, None) => PathBuf::from("runs").join(default_name),
    }
}

fn policy_flops(source: &PolicySource, model: &SegModel) -> anyhow::Result<Option<u64>> {
    Ok(match source {
        PolicySource::Net(net) => Some(net.flops(model.config.height, model.config.width)?),
        _ => None,
    })
}

fn cost_report(model: &SegModel, source: &PolicySource, s: usize) -> anyhow::Result<CostReport> {
    let n = model.geom().num_patches();
    if 3 * s > n {
        bail!("share setting {s} exceeds the superpatch grid");
    }
    let m = n - 3 * s;
    let flops = flop_model(&model.config.vit, m, decoder_flops(model, m), policy_flops(source, model)?);
    Ok(CostReport::new(n, s, flops)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { config, data } => {
            let cfg = load_config(&config, seed)?;
            let dir = data.unwrap_or_else(|| cfg.data_root.clone());
            let ds = Dataset::generate(&cfg.dataset)?;
            ds.save(&dir)?;
            let hist = superpatch_stats(&ds.masks(), cfg.vit.patch_size)?;
            let mut r = Report::new("synth", Some(&cfg), &[("data", dir.display().to_string())]);
            r.line(format!("scenes={}", ds.len()));
            r.line(format!("train_scenes={}", ds.len() - cfg.val_count));
            r.line(format!("val_scenes={}", cfg.val_count));
            r.line(hist.report());
            r.finish(&out_dir(&cli.out, Some(&cfg), "synth"))
        }
        Command::Stats { data, patch_size } => {
            let ds = load_dataset(&data)?;
            let hist = superpatch_stats(&ds.masks(), patch_size)?;
            let mut r = Report::new(
                "stats",
                None,
                &[("data", data.display().to_string()), ("patch_size", patch_size.to_string())],
            );
            r.line(hist.report());
            r.finish(&out_dir(&cli.out, None, "stats"))
        }
        Command::TrainPolicy { config, data } => {
            let cfg = load_config(&config, seed)?;
            let dir = data.unwrap_or_else(|| cfg.data_root.clone());
            let (train, val) = split_dataset(&cfg, &dir)?;
            let t0 = Instant::now();
            let (net, log) = train_policy(&train, &cfg.policy_config())?;
            let secs = t0.elapsed().as_secs_f64();
            let out = out_dir(&cli.out, Some(&cfg), "policy");
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("policy.ckpt");
            net.save(&ckpt)?;
            cfg.write(config_path(&ckpt))?;

            let mut r = Report::new("train-policy", Some(&cfg), &[("data", dir.display().to_string())]);
            r.line(format!("loss_initial={:.6}", log.initial()));
            r.line(format!("loss_final={:.6}", log.tail_mean(20)));
            r.line(precision_table(&net, &val, &cfg)?);
            r.timing(format!("train_secs={secs:.2}"));
            r.finish(&out)
        }
        Command::TrainSeg {
            config,
            policy,
            share,
            data,
        } => {
            let cfg = load_config(&config, seed)?;
            let spec: PolicySpec = policy.parse()?;
            check_schedule(&[share], cfg.total_superpatches()?)?;
            let dir = data.unwrap_or_else(|| cfg.data_root.clone());
            let (train, val) = split_dataset(&cfg, &dir)?;
            let source = spec.source()?;
            let t0 = Instant::now();
            let (model, log) = train_segmenter(&train, &source, share, &cfg.seg_config())?;
            let secs = t0.elapsed().as_secs_f64();
            let out = out_dir(&cli.out, Some(&cfg), &format!("seg-S{share}"));
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("seg.ckpt");
            model.save(&ckpt)?;
            cfg.write(config_path(&ckpt))?;

            let result = evaluate_with_threads(&model, &val, &source, share, threads_from_env()?)?;
            let mut cost = cost_report(&model, &source, share)?;
            cost.miou = Some(result.miou());
            let mut r = Report::new(
                "train-seg",
                Some(&cfg),
                &[
                    ("data", dir.display().to_string()),
                    ("policy", spec.to_string()),
                    ("share", share.to_string()),
                ],
            );
            r.line(format!("loss_initial={:.6}", log.initial()));
            r.line(format!("loss_final={:.6}", log.tail_mean(20)));
            r.line(format!("val_miou={:.6}", result.miou()));
            r.line(cost.kv_lines(""));
            r.timing(format!("train_secs={secs:.2}"));
            r.finish(&out)
        }
        Command::Eval {
            seg,
            policy,
            share,
            path,
            data,
        } => {
            let (model, mut cfg) = load_seg(&seg)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let kind = DecoderKind::from_path(&path)?;
            if kind != model.config.decoder {
                bail!(
                    "checkpoint {} uses the {} path, not {path}",
                    seg.display(),
                    model.config.decoder.path_name()
                );
            }
            let spec: PolicySpec = policy.parse()?;
            check_schedule(&[share], cfg.total_superpatches()?)?;
            let dir = data.unwrap_or_else(|| cfg.data_root.clone());
            let (_, val) = split_dataset(&cfg, &dir)?;
            let source = spec.source()?;
            let result = evaluate_with_threads(&model, &val, &source, share, threads_from_env()?)?;
            let mut cost = cost_report(&model, &source, share)?;
            cost.miou = Some(result.miou());

            let p = model.config.vit.patch_size;
            let voted = result
                .predictions
                .iter()
                .zip(&result.policies)
                .map(|(pred, pol)| majority_vote(pred, pol, p))
                .collect::<crate::error::Result<Vec<_>>>()?;
            let voted_miou = miou(&voted, &val.masks(), model.config.num_classes)?;
            let changed: usize = voted
                .iter()
                .zip(&result.predictions)
                .map(|(a, b)| a.labels.iter().zip(&b.labels).filter(|(x, y)| x != y).count())
                .sum();

            let mut r = Report::new(
                "eval",
                Some(&cfg),
                &[
                    ("seg", seg.display().to_string()),
                    ("data", dir.display().to_string()),
                    ("policy", spec.to_string()),
                    ("share", share.to_string()),
                    ("path", path.clone()),
                ],
            );
            r.line(format!("{:>6} {:>8}", "class", "IoU"));
            for (k, iou) in result.confusion.iou().iter().enumerate() {
                let v = iou.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
                r.line(format!("{k:>6} {v:>8}"));
            }
            r.line(format!("images={}", val.len()));
            r.line(format!("miou={:.6}", result.miou()));
            r.line(format!("pixel_accuracy={:.6}", result.confusion.pixel_accuracy()));
            if let Some(pr) = result.policy_precision {
                r.line(format!("policy_precision={pr:.6}"));
            }
            r.line(format!("majority_vote_miou={voted_miou:.6}"));
            r.line(format!("majority_vote_delta={:.6}", voted_miou - result.miou()));
            r.line(format!("majority_vote_changed_pixels={changed}"));
            r.line(cost.kv_lines(""));
            r.finish(&out_dir(&cli.out, Some(&cfg), &format!("eval-S{share}-{path}")))
        }
        Command::Bench {
            seg,
            share_schedule,
            policy,
            warmup,
            iters,
            runs,
            data,
        } => {
            let (model, cfg) = load_seg(&seg)?;
            check_schedule(&share_schedule, cfg.total_superpatches()?)?;
            if runs == 0 {
                bail!("--runs must be positive");
            }
            let spec: PolicySpec = policy.parse()?;
            let source = spec.source()?;
            let dir = data.unwrap_or_else(|| cfg.data_root.clone());
            let (_, val) = split_dataset(&cfg, &dir)?;
            let p = model.config.vit.patch_size;

            let mut r = Report::new(
                "bench",
                Some(&cfg),
                &[
                    ("seg", seg.display().to_string()),
                    ("data", dir.display().to_string()),
                    ("policy", spec.to_string()),
                    ("warmup", warmup.to_string()),
                    ("iters", iters.to_string()),
                    ("runs", runs.to_string()),
                    ("batch", "1".into()),
                ],
            );
            r.line(format!("hardware={}", hardware_string()));
            r.line(format!(
                "{:>6} {:>6} {:>10} {:>14} {:>14} {:>14}",
                "S", "M", "reduction", "attn_MFLOPs", "total_MFLOPs", "im/sec"
            ));
            let mut rows = Vec::new();
            for &s in &share_schedule {
                let mut cursor = 0usize;
                let mut samples = Vec::with_capacity(runs);
                for _ in 0..runs {
                    let res = benchmark(1, warmup, iters, || {
                        let sample = &val.samples[cursor % val.len()];
                        cursor += 1;
                        let policy = source.policy(sample, s, p, 0)?;
                        model.predict(&sample.image, &policy).map(|_| ())
                    })?;
                    samples.push(res.images_per_sec);
                }
                let mut cost = cost_report(&model, &source, s)?;
                cost.images_per_sec = Some(median(samples));
                r.line(format!(
                    "{:>6} {:>6} {:>9.1}% {:>14.3} {:>14.3} {:>14}",
                    cost.s,
                    cost.m,
                    100.0 * cost.token_reduction,
                    cost.flops.attention as f64 / 1e6,
                    cost.flops.total() as f64 / 1e6,
                    "(timing)"
                ));
                rows.push(cost);
            }
            for cost in &rows {
                r.line(cost.kv_lines(&format!("S{}.", cost.s)));
            }
            r.finish(&out_dir(&cli.out, Some(&cfg), "bench"))
        }
        Command::Dynamic {
            models,
            policy,
            tau,
            individual,
            data,
        } => {
            let mut loaded = BTreeMap::new();
            let mut base_cfg = None;
            for entry in &models {
                let (s, path) = entry
                    .split_once('=')
                    .ok_or_else(|| anyhow!("model entry {entry:?} is not S=ckpt"))?;
                let s: usize = s.trim().parse().with_context(|| format!("bad S in {entry:?}"))?;
                let (model, cfg) = load_seg(Path::new(path.trim()))?;
                check_schedule(&[s], cfg.total_superpatches()?)?;
                if s == 0 {
                    base_cfg = Some(cfg);
                }
                if loaded.insert(s, model).is_some() {
                    bail!("setting S={s} given twice");
                }
            }
            let cfg = base_cfg.ok_or_else(|| anyhow!("dynamic evaluation needs an S=0 model"))?;
            let geom = (cfg.dataset.height, cfg.dataset.width, cfg.vit.patch_size);
            for (s, m) in &loaded {
                if (m.config.height, m.config.width, m.config.vit.patch_size) != geom {
                    bail!("model for S={s} has a different input geometry");
                }
            }
            let (net, _) = load_policy(&policy)?;
            let dir = data.unwrap_or_else(|| cfg.data_root.clone());
            let (_, val) = split_dataset(&cfg, &dir)?;
            let mut r = Report::new(
                "dynamic",
                Some(&cfg),
                &[
                    ("models", models.join(",")),
                    ("policy", policy.display().to_string()),
                    ("data", dir.display().to_string()),
                    ("tau", tau.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")),
                ],
            );
            for (i, &t) in tau.iter().enumerate() {
                let rep = dynamic_eval(&loaded, &net, t, &val, individual && i == 0)?;
                r.line(rep.table());
            }
            r.finish(&out_dir(&cli.out, Some(&cfg), "dynamic"))
        }
    }
}

/// Precision of the trained policy against random selection at each
/// nonzero schedule setting, averaged over validation images.
fn precision_table(net: &PolicyNet, val: &Dataset, cfg: &ExperimentConfig) -> anyhow::Result<String> {
    let p = cfg.vit.patch_size;
    let total = cfg.total_superpatches()?;
    let mut settings: Vec<usize> = cfg.schedule.iter().copied().filter(|&s| s > 0).collect();
    let quarter = (total as f64 * 0.25).round() as usize;
    if quarter > 0 && !settings.contains(&quarter) {
        settings.push(quarter);
        settings.sort_unstable();
    }
    let mut scores = Vec::with_capacity(val.len());
    let mut gts = Vec::with_capacity(val.len());
    for sample in &val.samples {
        scores.push(net.scores(&sample.image)?);
        gts.push(gt_policy(&sample.mask, p)?);
    }
    let base = gts.iter().map(|g| g.base_rate()).sum::<f64>() / gts.len() as f64;
    let mut s_out = format!("{:>6} {:>10} {:>10}\n", "S", "policy", "random");
    let mut kv = String::new();
    for &s in &settings {
        let mut pol = 0.0;
        let mut rnd = 0.0;
        for (i, (sc, gt)) in scores.iter().zip(&gts).enumerate() {
            pol += precision(&select_top_s(sc, s)?, gt)?;
            let mut rng = ChaCha8Rng::seed_from_u64((cfg.seed << 32) ^ ((s as u64) << 16) ^ i as u64);
            rnd += precision(&random_policy(gt.rows, gt.cols, s, &mut rng)?, gt)?;
        }
        let n = scores.len() as f64;
        let _ = writeln!(s_out, "{s:>6} {:>10.4} {:>10.4}", pol / n, rnd / n);
        let _ = writeln!(kv, "precision_S{s}={:.6} random_precision_S{s}={:.6}", pol / n, rnd / n);
    }
    let _ = writeln!(kv, "gt_base_rate={base:.6}");
    let _ = writeln!(kv, "quarter_setting={quarter}");
    Ok(s_out + &kv)
}

/// Entry point for the binary: one-line diagnostic and nonzero exit on error.
pub fn main_entry() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
