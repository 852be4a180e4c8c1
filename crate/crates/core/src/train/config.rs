//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; an
//! unknown key is an error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::{GenerationOrder, MaskMode, PositionMode, ScheduleSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Architecture; vocabulary sizes are taken from the training data.
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub optim: OptimizerConfig,
    pub epochs: usize,
    /// Stop after this many updates; 0 means no limit.
    pub max_steps: usize,
    pub snapshot_every: usize,
    /// Number of trailing snapshots averaged into the final parameters.
    pub average_last: usize,
    pub log_every: usize,
    pub seed: u64,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Teacher checkpoint for distillation runs.
    pub teacher: Option<PathBuf>,
    pub distill_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleSpec::autoregressive(),
            optim: OptimizerConfig::default(),
            epochs: 10,
            max_steps: 0,
            snapshot_every: 100,
            average_last: 5,
            log_every: 100,
            seed: 1,
            train: None,
            valid: None,
            output: None,
            teacher: None,
            distill_beam: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

/// Schedule keys are collected first because the generation order decides
/// the defaults of the others.
#[derive(Default)]
struct ScheduleKeys {
    order: Option<GenerationOrder>,
    h: Option<usize>,
    c: Option<usize>,
    positions: Option<PositionMode>,
    mask: Option<MaskMode>,
    independent: Option<bool>,
    direction_embedding: Option<bool>,
    autoregressive: Option<bool>,
}

impl ScheduleKeys {
    fn build(&self) -> Result<ScheduleSpec> {
        let c = self.c.unwrap_or(1);
        let mut spec = match self.order.unwrap_or(GenerationOrder::L2r) {
            GenerationOrder::L2r => ScheduleSpec::semi_autoregressive(c),
            GenerationOrder::Bd => ScheduleSpec::bidirectional_sa(c),
            GenerationOrder::Md => ScheduleSpec { c, ..ScheduleSpec::multi_directional(self.h.unwrap_or(4)) },
            GenerationOrder::MiddleToSide => ScheduleSpec { c, ..ScheduleSpec::middle_to_side() },
        };
        if let Some(h) = self.h {
            if h != spec.h {
                return Err(Error::Config(format!("order {} does not allow h = {h}", spec.order)));
            }
        }
        if let Some(p) = self.positions {
            spec.positions = p;
        }
        if let Some(m) = self.mask {
            spec.mask = m;
        }
        if self.independent == Some(true) {
            spec = spec.independent_directions();
        }
        if let Some(d) = self.direction_embedding {
            spec.use_direction_embedding = d;
        }
        if self.autoregressive == Some(true) {
            spec = spec.as_autoregressive();
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut sched = ScheduleKeys::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let at = |e: Error| Error::Config(format!("line {}: {e}", i + 1));
            cfg.set(key, value, &mut sched).map_err(at)?;
        }
        cfg.schedule = sched.build()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str, sched: &mut ScheduleKeys) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match key {
            "d" => m.d = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "enc_layers" => m.enc_layers = parse(key, value)?,
            "dec_layers" => m.dec_layers = parse(key, value)?,
            "ffn" => m.ffn = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "label_smoothing" => m.label_smoothing = parse(key, value)?,
            "tie_embeddings" => m.tie_embeddings = parse_bool(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "max_abs_position" => m.max_abs_position = parse(key, value)?,
            "order" => sched.order = Some(value.parse()?),
            "h" => sched.h = Some(parse(key, value)?),
            "c" => sched.c = Some(parse(key, value)?),
            "positions" => sched.positions = Some(value.parse()?),
            "mask" => sched.mask = Some(value.parse()?),
            "independent_directions" => sched.independent = Some(parse_bool(key, value)?),
            "direction_embedding" => sched.direction_embedding = Some(parse_bool(key, value)?),
            "autoregressive" => sched.autoregressive = Some(parse_bool(key, value)?),
            "beta1" => o.beta1 = parse(key, value)?,
            "beta2" => o.beta2 = parse(key, value)?,
            "epsilon" => o.epsilon = parse(key, value)?,
            "warmup" => o.warmup = parse(key, value)?,
            "lr_scale" => o.lr_scale = parse(key, value)?,
            "tokens_per_batch" => o.tokens_per_batch = parse(key, value)?,
            "clip_norm" => o.clip_norm = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "snapshot_every" => self.snapshot_every = parse(key, value)?,
            "average_last" => self.average_last = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train" => self.train = Some(PathBuf::from(value)),
            "valid" => self.valid = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            "teacher" => self.teacher = Some(PathBuf::from(value)),
            "distill_beam" => self.distill_beam = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.schedule.validate()?;
        if self.snapshot_every == 0 || self.average_last == 0 {
            return Err(Error::InvalidConfig("snapshot_every and average_last must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::InvalidConfig("training needs epochs or max_steps".into()));
        }
        if self.distill_beam == 0 {
            return Err(Error::InvalidConfig("distill_beam must be positive".into()));
        }
        Ok(())
    }

    /// Renders every key so that `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (m, o, s) = (&self.model, &self.optim, &self.schedule);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("d", m.d.to_string());
        kv("heads", m.heads.to_string());
        kv("enc_layers", m.enc_layers.to_string());
        kv("dec_layers", m.dec_layers.to_string());
        kv("ffn", m.ffn.to_string());
        kv("dropout", m.dropout.to_string());
        kv("label_smoothing", m.label_smoothing.to_string());
        kv("tie_embeddings", m.tie_embeddings.to_string());
        kv("max_len", m.max_len.to_string());
        kv("max_abs_position", m.max_abs_position.to_string());
        kv("order", s.order.to_string());
        kv("h", s.h.to_string());
        kv("c", s.c.to_string());
        kv("positions", s.positions.to_string());
        kv("mask", s.mask.to_string());
        kv("independent_directions", (!s.cross_direction).to_string());
        kv("direction_embedding", s.use_direction_embedding.to_string());
        kv("autoregressive", s.autoregressive.to_string());
        kv("beta1", o.beta1.to_string());
        kv("beta2", o.beta2.to_string());
        kv("epsilon", o.epsilon.to_string());
        kv("warmup", o.warmup.to_string());
        kv("lr_scale", o.lr_scale.to_string());
        kv("tokens_per_batch", o.tokens_per_batch.to_string());
        kv("clip_norm", o.clip_norm.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("snapshot_every", self.snapshot_every.to_string());
        kv("average_last", self.average_last.to_string());
        kv("log_every", self.log_every.to_string());
        kv("seed", self.seed.to_string());
        kv("distill_beam", self.distill_beam.to_string());
        for (k, p) in [("train", &self.train), ("valid", &self.valid), ("output", &self.output), ("teacher", &self.teacher)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        out
    }
}
