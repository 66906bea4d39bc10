//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma
//! separated. `model.preset` is applied before every other key, so the
//! remaining `model.*`/`moe.*` entries refine the preset wherever they
//! appear. Unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{BenchGrid, BenchRouter, CollapseConfig, ThetaInit};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, RouterKind, Schedule, TrainHyper};
use crate::sparse::{RouterFamily, SweepGrid};
use crate::variants::VariantKind;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub eval_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 2048,
            test_size: 512,
            noise: 1.0,
            eval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsConfig {
    pub model: String,
    pub resolution: usize,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            model: "vit-s16".into(),
            resolution: 224,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectConfig {
    pub checkpoint: Option<PathBuf>,
    /// Test images routed through the model.
    pub images: usize,
}

impl Default for InspectConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: EncoderConfig,
    pub train: TrainHyper,
    pub data: DataConfig,
    pub sweep: SweepGrid,
    pub collapse: CollapseConfig,
    pub flops: FlopsConfig,
    pub bench: BenchGrid,
    pub inspect: InspectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: EncoderConfig::default(),
            train: TrainHyper::default(),
            data: DataConfig::default(),
            sweep: SweepGrid::default(),
            collapse: CollapseConfig::default(),
            flops: FlopsConfig::default(),
            bench: BenchGrid::default(),
            inspect: InspectConfig::default(),
        }
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| scalar(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

struct Family(RouterFamily);

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        RouterFamily::parse(s)
            .map(Family)
            .ok_or_else(|| format!("unknown router family `{s}` (tokens_choice|experts_choice)"))
    }
}

/// Splits a document into `(line number, key, value)` entries.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`"))
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override as given to `--set`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    /// Every key accepted by [`ExperimentConfig::set`], in output order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out",
        "model.preset",
        "model.image_size",
        "model.channels",
        "model.patch_size",
        "model.depth",
        "model.width",
        "model.heads",
        "model.mlp_dim",
        "model.num_classes",
        "moe.layers",
        "moe.router",
        "moe.n",
        "moe.p",
        "moe.k",
        "moe.c",
        "moe.bpr",
        "moe.group_size",
        "moe.normalize",
        "routing.variant",
        "train.steps",
        "train.batch_size",
        "train.lr",
        "train.warmup_frac",
        "train.weight_decay",
        "train.beta1",
        "train.beta2",
        "train.schedule",
        "train.checkpoint_every",
        "train.log_wall_clock",
        "data.train_size",
        "data.test_size",
        "data.noise",
        "data.eval_batch",
        "sweep.routers",
        "sweep.experts",
        "sweep.k",
        "sweep.c",
        "sweep.bpr",
        "sweep.group_tokens",
        "sweep.samples",
        "sweep.logit_std",
        "collapse.dims",
        "collapse.trials",
        "collapse.tokens",
        "collapse.slots",
        "collapse.init",
        "collapse.scale",
        "flops.model",
        "flops.resolution",
        "bench.routers",
        "bench.experts",
        "bench.total_slots",
        "bench.sequences",
        "bench.tokens",
        "bench.d",
        "bench.d_mlp",
        "bench.warmup",
        "bench.reps",
        "inspect.checkpoint",
        "inspect.images",
    ];

    /// Applies one entry. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let m = &mut self.model;
        match key {
            "seed" => self.seed = scalar(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "model.preset" => {
                *m = EncoderConfig::preset(v).ok_or_else(|| {
                    Error::config(key, format!("unknown preset `{v}` ({})", EncoderConfig::PRESETS.join("|")))
                })?
            }
            "model.image_size" => m.image_size = scalar(key, v)?,
            "model.channels" => m.channels = scalar(key, v)?,
            "model.patch_size" => m.patch_size = scalar(key, v)?,
            "model.depth" => m.depth = scalar(key, v)?,
            "model.width" => m.width = scalar(key, v)?,
            "model.heads" => m.heads = scalar(key, v)?,
            "model.mlp_dim" => m.mlp_dim = scalar(key, v)?,
            "model.num_classes" => m.num_classes = scalar(key, v)?,
            "moe.layers" => m.moe.layers = list(key, v)?,
            "moe.router" => m.moe.router = scalar::<RouterKind>(key, v)?,
            "moe.n" => m.moe.experts = scalar(key, v)?,
            "moe.p" => m.moe.slots_per_expert = scalar(key, v)?,
            "moe.k" => m.moe.k = scalar(key, v)?,
            "moe.c" => m.moe.capacity_factor = scalar(key, v)?,
            "moe.bpr" => m.moe.bpr = scalar(key, v)?,
            "moe.group_size" => m.moe.group_size = scalar(key, v)?,
            "moe.normalize" => m.moe.normalize = scalar(key, v)?,
            "routing.variant" => m.moe.variant = scalar::<VariantKind>(key, v)?,
            "train.steps" => self.train.steps = scalar(key, v)?,
            "train.batch_size" => self.train.batch_size = scalar(key, v)?,
            "train.lr" => self.train.peak_lr = scalar(key, v)?,
            "train.warmup_frac" => self.train.warmup_frac = scalar(key, v)?,
            "train.weight_decay" => self.train.weight_decay = scalar(key, v)?,
            "train.beta1" => self.train.beta1 = scalar(key, v)?,
            "train.beta2" => self.train.beta2 = scalar(key, v)?,
            "train.schedule" => self.train.schedule = scalar::<Schedule>(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = scalar(key, v)?,
            "train.log_wall_clock" => self.train.log_wall_clock = scalar(key, v)?,
            "data.train_size" => self.data.train_size = scalar(key, v)?,
            "data.test_size" => self.data.test_size = scalar(key, v)?,
            "data.noise" => self.data.noise = scalar(key, v)?,
            "data.eval_batch" => self.data.eval_batch = scalar(key, v)?,
            "sweep.routers" => {
                self.sweep.routers = list::<Family>(key, v)?.into_iter().map(|f| f.0).collect()
            }
            "sweep.experts" => self.sweep.experts = list(key, v)?,
            "sweep.k" => self.sweep.ks = list(key, v)?,
            "sweep.c" => self.sweep.capacity_factors = list(key, v)?,
            "sweep.bpr" => self.sweep.bpr = list(key, v)?,
            "sweep.group_tokens" => self.sweep.group_tokens = scalar(key, v)?,
            "sweep.samples" => self.sweep.samples = scalar(key, v)?,
            "sweep.logit_std" => self.sweep.logit_std = scalar(key, v)?,
            "collapse.dims" => self.collapse.dims = list(key, v)?,
            "collapse.trials" => self.collapse.trials = scalar(key, v)?,
            "collapse.tokens" => self.collapse.tokens = scalar(key, v)?,
            "collapse.slots" => self.collapse.slots = scalar(key, v)?,
            "collapse.init" => self.collapse.init = scalar::<ThetaInit>(key, v)?,
            "collapse.scale" => self.collapse.scale = scalar(key, v)?,
            "flops.model" => self.flops.model = v.to_string(),
            "flops.resolution" => self.flops.resolution = scalar(key, v)?,
            "bench.routers" => self.bench.routers = list::<BenchRouter>(key, v)?,
            "bench.experts" => self.bench.experts = list(key, v)?,
            "bench.total_slots" => self.bench.total_slots = scalar(key, v)?,
            "bench.sequences" => self.bench.sequences = scalar(key, v)?,
            "bench.tokens" => self.bench.tokens = scalar(key, v)?,
            "bench.d" => self.bench.d = scalar(key, v)?,
            "bench.d_mlp" => self.bench.d_mlp = scalar(key, v)?,
            "bench.warmup" => self.bench.warmup = scalar(key, v)?,
            "bench.reps" => self.bench.reps = scalar(key, v)?,
            "inspect.checkpoint" => {
                self.inspect.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v))
            }
            "inspect.images" => self.inspect.images = scalar(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies entries with `model.preset` first.
    pub fn apply<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let entries: Vec<_> = entries.into_iter().collect();
        for &(k, v) in entries.iter().filter(|(k, _)| *k == "model.preset") {
            self.set(k, v)?;
        }
        for &(k, v) in entries.iter().filter(|(k, _)| *k != "model.preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = entries(text)?;
        let mut cfg = Self::default();
        cfg.apply(entries.iter().map(|(_, k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Cross-field checks beyond what a single key can see.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("train.batch_size", self.train.batch_size),
            ("data.train_size", self.data.train_size),
            ("data.test_size", self.data.test_size),
            ("data.eval_batch", self.data.eval_batch),
            ("sweep.group_tokens", self.sweep.group_tokens),
            ("sweep.samples", self.sweep.samples),
            ("collapse.trials", self.collapse.trials),
            ("inspect.images", self.inspect.images),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.train.peak_lr > 0.0 && self.train.peak_lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.train.warmup_frac) {
            return Err(Error::config("train.warmup_frac", "must be in [0, 1)"));
        }
        if !(self.data.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be non-negative"));
        }
        if self.collapse.dims.len() < 2 {
            return Err(Error::config("collapse.dims", "need at least two widths"));
        }
        if self.bench.warmup < 3 {
            return Err(Error::config("bench.warmup", "need at least 3 warmup reps"));
        }
        if self.bench.reps < 20 {
            return Err(Error::config("bench.reps", "need at least 20 timed reps"));
        }
        if EncoderConfig::preset(&self.flops.model).is_none() {
            return Err(Error::config(
                "flops.model",
                format!("unknown preset `{}`", self.flops.model),
            ));
        }
        Ok(())
    }

    /// The fully resolved document; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.sweep;
        let c = &self.collapse;
        let b = &self.bench;
        let families: Vec<&str> = s.routers.iter().map(|r| r.name()).collect();
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.width", m.width.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_dim", m.mlp_dim.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("moe.layers", join(&m.moe.layers)),
            ("moe.router", m.moe.router.to_string()),
            ("moe.n", m.moe.experts.to_string()),
            ("moe.p", m.moe.slots_per_expert.to_string()),
            ("moe.k", m.moe.k.to_string()),
            ("moe.c", m.moe.capacity_factor.to_string()),
            ("moe.bpr", m.moe.bpr.to_string()),
            ("moe.group_size", m.moe.group_size.to_string()),
            ("moe.normalize", m.moe.normalize.to_string()),
            ("routing.variant", m.moe.variant.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.peak_lr.to_string()),
            ("train.warmup_frac", t.warmup_frac.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.schedule", t.schedule.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.log_wall_clock", t.log_wall_clock.to_string()),
            ("data.train_size", self.data.train_size.to_string()),
            ("data.test_size", self.data.test_size.to_string()),
            ("data.noise", self.data.noise.to_string()),
            ("data.eval_batch", self.data.eval_batch.to_string()),
            ("sweep.routers", families.join(",")),
            ("sweep.experts", join(&s.experts)),
            ("sweep.k", join(&s.ks)),
            ("sweep.c", join(&s.capacity_factors)),
            ("sweep.bpr", join(&s.bpr)),
            ("sweep.group_tokens", s.group_tokens.to_string()),
            ("sweep.samples", s.samples.to_string()),
            ("sweep.logit_std", s.logit_std.to_string()),
            ("collapse.dims", join(&c.dims)),
            ("collapse.trials", c.trials.to_string()),
            ("collapse.tokens", c.tokens.to_string()),
            ("collapse.slots", c.slots.to_string()),
            ("collapse.init", c.init.to_string()),
            ("collapse.scale", c.scale.to_string()),
            ("flops.model", self.flops.model.clone()),
            ("flops.resolution", self.flops.resolution.to_string()),
            ("bench.routers", join(&b.routers)),
            ("bench.experts", join(&b.experts)),
            ("bench.total_slots", b.total_slots.to_string()),
            ("bench.sequences", b.sequences.to_string()),
            ("bench.tokens", b.tokens.to_string()),
            ("bench.d", b.d.to_string()),
            ("bench.d_mlp", b.d_mlp.to_string()),
            ("bench.warmup", b.warmup.to_string()),
            ("bench.reps", b.reps.to_string()),
            (
                "inspect.checkpoint",
                self.inspect
                    .checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("inspect.images", self.inspect.images.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
