//! Experiment configuration as flat `section.key = value` text.
//!
//! ```text
//! # comment
//! experiment.output_dir = runs/english
//! experiment.seeds = 1, 2, 3, 4, 5
//! experiment.conditions = clean, rec, vc
//! experiment.route = audio
//! data.vc_manifests = timit.jsonl, mboshi.jsonl, yoruba.jsonl
//! target.english.manifest = timit.jsonl
//! target.english.reference = timit_phones.txt
//! fvae.steps = 200
//! hmmvae.units = 80
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Every key not given keeps its default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::DEFAULT_BATCH_SIZE;
use crate::fvae::{Activation, FvaeConfig};
use crate::hmmvae::{HmmVaeConfig, UnitTransitions};
use crate::metrics::{BoundaryOptions, Matching};
use crate::normalizer::ConversionRoute;
use crate::features::GRIFFIN_LIM_ITERATIONS;
use crate::{Error, Result};

/// Independent training runs per system.
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// FVAE updates per seed. Full-scale training length is not known; this is
/// a smoke-scale default meant to be raised for real corpora.
pub const DEFAULT_FVAE_STEPS: usize = 200;

/// Input to acoustic unit discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Original audio.
    Clean,
    /// Every utterance converted to its own style.
    Rec,
    /// Every utterance converted to the corpus' style medoid.
    Vc,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clean, Condition::Rec, Condition::Vc];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Rec => "rec",
            Condition::Vc => "vc",
        }
    }

    pub fn needs_fvae(self) -> bool {
        self != Condition::Clean
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "rec" => Ok(Condition::Rec),
            "vc" => Ok(Condition::Vc),
            _ => Err(Error::InvalidArgument(format!("unknown condition `{s}` (clean, rec, vc)"))),
        }
    }
}

/// A corpus on which acoustic units are discovered and scored.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCorpus {
    /// Language label used in reports.
    pub name: String,
    pub manifest: PathBuf,
    /// Time-marked reference transcription.
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    pub route: ConversionRoute,
    /// Corpora pooled for FVAE training.
    pub vc_manifests: Vec<PathBuf>,
    pub targets: Vec<TargetCorpus>,
    pub fvae: FvaeConfig,
    pub fvae_steps: usize,
    pub fvae_batch_size: usize,
    pub hmmvae: HmmVaeConfig,
    /// Models trained per seed; the lowest corpus loss is kept.
    pub hmmvae_restarts: usize,
    pub griffin_lim_iterations: usize,
    pub boundary: BoundaryOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: DEFAULT_SEEDS.to_vec(),
            conditions: Condition::ALL.to_vec(),
            route: ConversionRoute::Audio,
            vc_manifests: Vec::new(),
            targets: Vec::new(),
            fvae: FvaeConfig::default(),
            fvae_steps: DEFAULT_FVAE_STEPS,
            fvae_batch_size: DEFAULT_BATCH_SIZE,
            hmmvae: HmmVaeConfig::default(),
            hmmvae_restarts: 1,
            griffin_lim_iterations: GRIFFIN_LIM_ITERATIONS,
            boundary: BoundaryOptions::default(),
        }
    }
}

fn list<T>(value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn num<T: FromStr>(value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("`{value}` is not a valid number")))
}

fn boolean(value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("`{value}` is not a boolean"))),
    }
}

fn activation(value: &str) -> Result<Activation> {
    match value.split_once(':') {
        None if value == "relu" => Ok(Activation::Relu),
        None if value == "tanh" => Ok(Activation::Tanh),
        Some(("leaky_relu", slope)) => Ok(Activation::LeakyRelu(num(slope)?)),
        _ => Err(Error::InvalidArgument(format!(
            "unknown activation `{value}` (relu, tanh, leaky_relu:<slope>)"
        ))),
    }
}

fn activation_name(a: Activation) -> String {
    match a {
        Activation::Relu => "relu".into(),
        Activation::Tanh => "tanh".into(),
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
    }
}

fn matching(value: &str) -> Result<Matching> {
    match value {
        "max_cardinality" => Ok(Matching::MaxCardinality),
        "greedy_nearest" => Ok(Matching::GreedyNearest),
        _ => Err(Error::InvalidArgument(format!(
            "unknown matching `{value}` (max_cardinality, greedy_nearest)"
        ))),
    }
}

fn transitions(value: &str) -> Result<UnitTransitions> {
    match value {
        "learned" => Ok(UnitTransitions::Learned),
        "uniform" => Ok(UnitTransitions::Uniform),
        _ => Err(Error::InvalidArgument(format!("unknown unit transitions `{value}` (learned, uniform)"))),
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.output_dir = base.join(&cfg.output_dir);
        let mut seen = BTreeMap::new();
        let mut targets: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
        let mut target_order = Vec::new();
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {line_no}: {m}"));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(format!("expected `key = value`, found `{line}`")))?;
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(at(format!("`{key}` already set on line {prev}")));
            }
            let wrap = |e: Error| match e {
                Error::InvalidArgument(m) => at(format!("{key}: {m}")),
                other => other,
            };
            if let Some(rest) = key.strip_prefix("target.") {
                let (name, field) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| at(format!("expected `target.<name>.manifest|reference`, found `{key}`")))?;
                if !targets.contains_key(name) {
                    target_order.push(name.to_string());
                }
                let entry = targets.entry(name.to_string()).or_default();
                match field {
                    "manifest" => entry.0 = Some(path(value)),
                    "reference" => entry.1 = Some(path(value)),
                    _ => return Err(at(format!("unknown target field `{field}`"))),
                }
                continue;
            }
            let f = &mut cfg.fvae;
            let h = &mut cfg.hmmvae;
            let result: Result<()> = (|| {
                match key {
                    "experiment.output_dir" => cfg.output_dir = path(value),
                    "experiment.seeds" => cfg.seeds = list(value, num)?,
                    "experiment.conditions" => cfg.conditions = list(value, Condition::from_str)?,
                    "experiment.route" => cfg.route = value.parse()?,
                    "data.vc_manifests" => cfg.vc_manifests = list(value, |v| Ok(path(v)))?,
                    "fvae.hidden" => f.hidden = num(value)?,
                    "fvae.content_dim" => f.content_dim = num(value)?,
                    "fvae.style_dim" => f.style_dim = num(value)?,
                    "fvae.cpc_dim" => f.cpc_dim = num(value)?,
                    "fvae.kernel" => f.kernel = num(value)?,
                    "fvae.cpc_kernels" => f.cpc_kernels = list(value, num)?,
                    "fvae.pooling" => f.pooling = num(value)?,
                    "fvae.activation" => f.activation = activation(value)?,
                    "fvae.beta" => f.beta = num(value)?,
                    "fvae.lambda" => f.lambda = num(value)?,
                    "fvae.tau_seconds" => f.tau_seconds = num(value)?,
                    "fvae.learning_rate" => f.learning_rate = num(value)?,
                    "fvae.grad_clip" => f.grad_clip = num(value)?,
                    "fvae.steps" => cfg.fvae_steps = num(value)?,
                    "fvae.batch_size" => cfg.fvae_batch_size = num(value)?,
                    "hmmvae.latent_dim" => h.latent_dim = num(value)?,
                    "hmmvae.hidden" => h.hidden = num(value)?,
                    "hmmvae.units" => h.units = num(value)?,
                    "hmmvae.activation" => h.activation = activation(value)?,
                    "hmmvae.obs_variance" => h.obs_variance = num(value)?,
                    "hmmvae.unit_transitions" => h.unit_transitions = transitions(value)?,
                    "hmmvae.learning_rate" => h.learning_rate = num(value)?,
                    "hmmvae.grad_clip" => h.grad_clip = num(value)?,
                    "hmmvae.batch_size" => h.batch_size = num(value)?,
                    "hmmvae.pretrain_iterations" => h.pretrain_iterations = num(value)?,
                    "hmmvae.train_iterations" => h.train_iterations = num(value)?,
                    "hmmvae.min_duration" => h.min_duration = num(value)?,
                    "hmmvae.max_duration" => h.max_duration = num(value)?,
                    "hmmvae.restarts" => cfg.hmmvae_restarts = num(value)?,
                    "normalizer.griffin_lim_iterations" => cfg.griffin_lim_iterations = num(value)?,
                    "metrics.collar" => cfg.boundary.collar = num(value)?,
                    "metrics.matching" => cfg.boundary.matching = matching(value)?,
                    "metrics.include_edges" => cfg.boundary.include_edges = boolean(value)?,
                    _ => return Err(Error::Config(format!("line {line_no}: unknown key `{key}`"))),
                }
                Ok(())
            })();
            result.map_err(wrap)?;
        }
        for name in target_order {
            let (manifest, reference) = targets.remove(&name).unwrap_or_default();
            let missing = |field: &str| Error::Config(format!("target `{name}` has no {field}"));
            cfg.targets.push(TargetCorpus {
                manifest: manifest.ok_or_else(|| missing("manifest"))?,
                reference: reference.ok_or_else(|| missing("reference"))?,
                name,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        if self.conditions.iter().any(|c| c.needs_fvae()) && self.vc_manifests.is_empty() {
            return bad("conditions rec and vc need a trained FVAE; set data.vc_manifests".into());
        }
        if self.targets.is_empty() {
            return bad("no target corpus; add target.<name>.manifest and target.<name>.reference".into());
        }
        let mut names: Vec<&str> = self.targets.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.targets.len() || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return bad("target names must be distinct path-safe words".into());
        }
        if self.fvae_batch_size < 2 {
            return bad("fvae.batch_size must be at least 2".into());
        }
        if self.hmmvae_restarts == 0 {
            return bad("hmmvae.restarts must be at least 1".into());
        }
        if !(self.boundary.collar >= 0.0) {
            return bad("metrics.collar must be non-negative".into());
        }
        self.fvae.validate().map_err(|e| Error::Config(format!("fvae: {e}")))?;
        self.hmmvae.validate().map_err(|e| Error::Config(format!("hmmvae: {e}")))?;
        Ok(())
    }

    /// Config text that parses back to `self` (paths written absolute).
    pub fn render(&self) -> String {
        let f = &self.fvae;
        let h = &self.hmmvae;
        let p = |p: &Path| p.display().to_string();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("experiment.output_dir", p(&self.output_dir));
        kv("experiment.seeds", join(&self.seeds));
        kv("experiment.conditions", join(&self.conditions));
        kv("experiment.route", self.route.as_str().into());
        kv(
            "data.vc_manifests",
            self.vc_manifests.iter().map(|m| p(m)).collect::<Vec<_>>().join(", "),
        );
        for t in &self.targets {
            kv(&format!("target.{}.manifest", t.name), p(&t.manifest));
            kv(&format!("target.{}.reference", t.name), p(&t.reference));
        }
        kv("fvae.hidden", f.hidden.to_string());
        kv("fvae.content_dim", f.content_dim.to_string());
        kv("fvae.style_dim", f.style_dim.to_string());
        kv("fvae.cpc_dim", f.cpc_dim.to_string());
        kv("fvae.kernel", f.kernel.to_string());
        kv("fvae.cpc_kernels", join(&f.cpc_kernels));
        kv("fvae.pooling", f.pooling.to_string());
        kv("fvae.activation", activation_name(f.activation));
        kv("fvae.beta", f.beta.to_string());
        kv("fvae.lambda", f.lambda.to_string());
        kv("fvae.tau_seconds", f.tau_seconds.to_string());
        kv("fvae.learning_rate", f.learning_rate.to_string());
        kv("fvae.grad_clip", f.grad_clip.to_string());
        kv("fvae.steps", self.fvae_steps.to_string());
        kv("fvae.batch_size", self.fvae_batch_size.to_string());
        kv("hmmvae.latent_dim", h.latent_dim.to_string());
        kv("hmmvae.hidden", h.hidden.to_string());
        kv("hmmvae.units", h.units.to_string());
        kv("hmmvae.activation", activation_name(h.activation));
        kv("hmmvae.obs_variance", h.obs_variance.to_string());
        kv(
            "hmmvae.unit_transitions",
            match h.unit_transitions {
                UnitTransitions::Learned => "learned",
                UnitTransitions::Uniform => "uniform",
            }
            .into(),
        );
        kv("hmmvae.learning_rate", h.learning_rate.to_string());
        kv("hmmvae.grad_clip", h.grad_clip.to_string());
        kv("hmmvae.batch_size", h.batch_size.to_string());
        kv("hmmvae.pretrain_iterations", h.pretrain_iterations.to_string());
        kv("hmmvae.train_iterations", h.train_iterations.to_string());
        kv("hmmvae.min_duration", h.min_duration.to_string());
        kv("hmmvae.max_duration", h.max_duration.to_string());
        kv("hmmvae.restarts", self.hmmvae_restarts.to_string());
        kv("normalizer.griffin_lim_iterations", self.griffin_lim_iterations.to_string());
        kv("metrics.collar", self.boundary.collar.to_string());
        kv(
            "metrics.matching",
            match self.boundary.matching {
                Matching::MaxCardinality => "max_cardinality",
                Matching::GreedyNearest => "greedy_nearest",
            }
            .into(),
        );
        kv("metrics.include_edges", self.boundary.include_edges.to_string());
        s
    }

    pub fn target(&self, name: &str) -> Result<&TargetCorpus> {
        self.targets
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("no target corpus named `{name}`")))
    }
}
