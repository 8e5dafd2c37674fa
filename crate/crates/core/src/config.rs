//! `key=value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and repeated keys are errors. `to_text` writes every key,
//! so a report's embedded config parses back to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{config_err, CtsError, Result};
use crate::eval::scaled_schedule;
use crate::policy_net::PolicyNetConfig;
use crate::segmenter::{DecoderKind, SegConfig};
use crate::sharing::GridGeom;
use crate::vit::ViTConfig;

/// Segmenter training knobs; geometry comes from the dataset and ViT.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTrainConfig {
    pub decoder: DecoderKind,
    pub spatial_hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        let d = SegConfig::default();
        Self {
            decoder: d.decoder,
            spatial_hidden: d.spatial_hidden,
            lr: d.lr,
            weight_decay: d.weight_decay,
            iterations: d.iterations,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    /// Seeds model init and batch order. Dataset content has its own seed.
    pub seed: u64,
    /// `patch_size` is kept equal to `vit.patch_size`.
    pub dataset: DatasetSpec,
    /// Trailing scenes held out for evaluation.
    pub val_count: usize,
    pub vit: ViTConfig,
    /// `seed` is overwritten from the top-level seed.
    pub policy: PolicyNetConfig,
    pub seg: SegTrainConfig,
    pub schedule: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        let total = (dataset.height / (2 * dataset.patch_size)) * (dataset.width / (2 * dataset.patch_size));
        Self {
            name: "desk".into(),
            data_root: PathBuf::from("data/desk"),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            dataset,
            val_count: 40,
            vit: ViTConfig::default(),
            policy: PolicyNetConfig::default(),
            seg: SegTrainConfig::default(),
            schedule: scaled_schedule(total),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("line {line}: bad value {value:?} for {key}"))
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim(), line)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| config_err!("line {line}: expected key=value, got {body:?}"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err!("line {line}: duplicate key {key}"));
            }
            c.set(key, value, line)?;
        }
        c.dataset.patch_size = c.vit.patch_size;
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        match key {
            "name" => self.name = v.to_string(),
            "data_root" => self.data_root = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = parse_num(key, v, line)?,
            "dataset.seed" => self.dataset.base_seed = parse_num(key, v, line)?,
            "dataset.count" => self.dataset.count = parse_num(key, v, line)?,
            "dataset.val_count" => self.val_count = parse_num(key, v, line)?,
            "dataset.height" => self.dataset.height = parse_num(key, v, line)?,
            "dataset.width" => self.dataset.width = parse_num(key, v, line)?,
            "dataset.num_classes" => self.dataset.num_classes = parse_num(key, v, line)?,
            "dataset.min_shapes" => self.dataset.min_shapes = parse_num(key, v, line)?,
            "dataset.max_shapes" => self.dataset.max_shapes = parse_num(key, v, line)?,
            "dataset.noise" => self.dataset.noise_amplitude = parse_num(key, v, line)?,
            "vit.depth" => self.vit.depth = parse_num(key, v, line)?,
            "vit.heads" => self.vit.heads = parse_num(key, v, line)?,
            "vit.embed_dim" => self.vit.embed_dim = parse_num(key, v, line)?,
            "vit.mlp_ratio" => self.vit.mlp_ratio = parse_num(key, v, line)?,
            "vit.patch_size" => self.vit.patch_size = parse_num(key, v, line)?,
            "policy.widths" => self.policy.widths = parse_list(key, v, line)?,
            "policy.lr" => self.policy.lr = parse_num(key, v, line)?,
            "policy.momentum" => self.policy.momentum = parse_num(key, v, line)?,
            "policy.weight_decay" => self.policy.weight_decay = parse_num(key, v, line)?,
            "policy.iterations" => self.policy.iterations = parse_num(key, v, line)?,
            "policy.batch_size" => self.policy.batch_size = parse_num(key, v, line)?,
            "seg.decoder" => self.seg.decoder = DecoderKind::from_path(v)?,
            "seg.spatial_hidden" => self.seg.spatial_hidden = parse_num(key, v, line)?,
            "seg.lr" => self.seg.lr = parse_num(key, v, line)?,
            "seg.weight_decay" => self.seg.weight_decay = parse_num(key, v, line)?,
            "seg.iterations" => self.seg.iterations = parse_num(key, v, line)?,
            "seg.batch_size" => self.seg.batch_size = parse_num(key, v, line)?,
            "schedule" => self.schedule = parse_list(key, v, line)?,
            _ => return Err(config_err!("line {line}: unknown key {key}")),
        }
        Ok(())
    }

    /// Reads a config file, or the `[config]` section of a report.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CtsError::io(path, e))?;
        Self::parse(config_section(&text).as_deref().unwrap_or(&text)).map_err(|e| match e {
            CtsError::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| CtsError::io(path, e))
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("name", self.name.clone());
        kv("data_root", self.data_root.display().to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("dataset.seed", d.base_seed.to_string());
        kv("dataset.count", d.count.to_string());
        kv("dataset.val_count", self.val_count.to_string());
        kv("dataset.height", d.height.to_string());
        kv("dataset.width", d.width.to_string());
        kv("dataset.num_classes", d.num_classes.to_string());
        kv("dataset.min_shapes", d.min_shapes.to_string());
        kv("dataset.max_shapes", d.max_shapes.to_string());
        kv("dataset.noise", d.noise_amplitude.to_string());
        kv("vit.depth", self.vit.depth.to_string());
        kv("vit.heads", self.vit.heads.to_string());
        kv("vit.embed_dim", self.vit.embed_dim.to_string());
        kv("vit.mlp_ratio", self.vit.mlp_ratio.to_string());
        kv("vit.patch_size", self.vit.patch_size.to_string());
        kv("policy.widths", join(&self.policy.widths));
        kv("policy.lr", self.policy.lr.to_string());
        kv("policy.momentum", self.policy.momentum.to_string());
        kv("policy.weight_decay", self.policy.weight_decay.to_string());
        kv("policy.iterations", self.policy.iterations.to_string());
        kv("policy.batch_size", self.policy.batch_size.to_string());
        kv("seg.decoder", self.seg.decoder.path_name().to_string());
        kv("seg.spatial_hidden", self.seg.spatial_hidden.to_string());
        kv("seg.lr", self.seg.lr.to_string());
        kv("seg.weight_decay", self.seg.weight_decay.to_string());
        kv("seg.iterations", self.seg.iterations.to_string());
        kv("seg.batch_size", self.seg.batch_size.to_string());
        kv("schedule", join(&self.schedule));
        s
    }

    pub fn geom(&self) -> Result<GridGeom> {
        let g = GridGeom::new(self.dataset.height, self.dataset.width, self.vit.patch_size)?;
        g.superpatch_grid()?;
        Ok(g)
    }

    pub fn total_superpatches(&self) -> Result<usize> {
        let (r, c) = self.geom()?.superpatch_grid()?;
        Ok(r * c)
    }

    /// Rejects schedules beyond the superpatch count and inconsistent sizes.
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let total = self.total_superpatches()?;
        check_schedule(&self.schedule, total)?;
        if self.dataset.min_shapes > self.dataset.max_shapes {
            return Err(config_err!(
                "dataset.min_shapes {} exceeds dataset.max_shapes {}",
                self.dataset.min_shapes,
                self.dataset.max_shapes
            ));
        }
        if self.dataset.num_classes < 2 {
            return Err(config_err!("dataset.num_classes must be at least 2"));
        }
        if self.val_count >= self.dataset.count {
            return Err(config_err!(
                "dataset.val_count {} leaves no training scenes out of {}",
                self.val_count,
                self.dataset.count
            ));
        }
        self.policy_config().strides()?;
        Ok(())
    }

    pub fn policy_config(&self) -> PolicyNetConfig {
        PolicyNetConfig {
            patch_size: self.vit.patch_size,
            seed: self.seed,
            ..self.policy.clone()
        }
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig {
            vit: self.vit,
            height: self.dataset.height,
            width: self.dataset.width,
            num_classes: self.dataset.num_classes,
            decoder: self.seg.decoder,
            spatial_hidden: self.seg.spatial_hidden,
            lr: self.seg.lr,
            weight_decay: self.seg.weight_decay,
            iterations: self.seg.iterations,
            batch_size: self.seg.batch_size,
            seed: self.seed,
        }
    }
}

/// Lines between a `[config]` header and the next `[...]` header.
pub fn config_section(text: &str) -> Option<String> {
    let mut lines = text.lines().skip_while(|l| l.trim() != REPORT_CONFIG_HEADER);
    lines.next()?;
    let body: Vec<&str> = lines.take_while(|l| !l.trim_start().starts_with('[')).collect();
    Some(body.join("\n"))
}

pub const REPORT_CONFIG_HEADER: &str = "[config]";

/// Every `S` must fit in the superpatch grid.
pub fn check_schedule(schedule: &[usize], total: usize) -> Result<()> {
    match schedule.iter().find(|&&s| s > total) {
        Some(s) => Err(config_err!("schedule value S={s} exceeds {total} superpatches")),
        None => Ok(()),
    }
}
