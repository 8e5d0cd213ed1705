//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregator::UpsampleMode;
use crate::data::SceneConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::moe::MoEConfig;
use crate::tasks::{validate_task_set, TaskId, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Encoder and decoder both train.
    Full,
    /// Encoder frozen; only decoder parameters train.
    DecoderOnly,
    /// One task's branch and head only, encoder frozen.
    Single(TaskId),
}

impl Mode {
    pub fn encoder_frozen(self) -> bool {
        !matches!(self, Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Full => f.write_str("full"),
            Mode::DecoderOnly => f.write_str("decoder-only"),
            Mode::Single(t) => write!(f, "single:{t}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "decoder-only" => Ok(Mode::DecoderOnly),
            _ => match s.strip_prefix("single:") {
                Some(t) => Ok(Mode::Single(t.parse()?)),
                None => Err(Error::Config(format!(
                    "unknown mode `{s}`; expected full, decoder-only or single:<task>"
                ))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    FgMoe,
    /// One residual per-token MLP shared by all tasks, sized to match the
    /// trainable count of the mixture decoder.
    SharedMlp,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::FgMoe => "fgmoe",
            DecoderKind::SharedMlp => "shared-mlp",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgmoe" => Ok(DecoderKind::FgMoe),
            "shared-mlp" => Ok(DecoderKind::SharedMlp),
            _ => Err(Error::Config(format!("unknown decoder `{s}`; expected fgmoe or shared-mlp"))),
        }
    }
}

fn upsample_name(m: UpsampleMode) -> &'static str {
    match m {
        UpsampleMode::Nearest => "nearest",
        UpsampleMode::Bilinear => "bilinear",
    }
}

fn parse_upsample(s: &str) -> Result<UpsampleMode> {
    match s {
        "nearest" => Ok(UpsampleMode::Nearest),
        "bilinear" => Ok(UpsampleMode::Bilinear),
        _ => Err(Error::Config(format!("unknown upsampling `{s}`; expected nearest or bilinear"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub image_size: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub encoder: EncoderConfig,
    /// Decoder width C; 0 selects 2·C'.
    pub channels: usize,
    pub heads: usize,
    pub moe: MoEConfig,
    pub decoder: DecoderKind,
    pub tasks: Vec<TaskId>,
    pub betas: BTreeMap<TaskId, f64>,
    pub aggregator_upsample: UpsampleMode,
    pub head_upsample: UpsampleMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mode: Mode,
    /// Routing statistics are logged every this many steps (0 disables).
    pub log_routing_every: usize,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            image_size: 64,
            classes: 6,
            train_samples: 200,
            eval_samples: 50,
            encoder: EncoderConfig::default(),
            channels: 0,
            heads: 4,
            moe: MoEConfig::default(),
            decoder: DecoderKind::FgMoe,
            tasks: TaskId::NYUD.to_vec(),
            betas: BTreeMap::new(),
            aggregator_upsample: UpsampleMode::Nearest,
            head_upsample: UpsampleMode::Nearest,
            lr: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            steps: 500,
            batch_size: 8,
            mode: Mode::DecoderOnly,
            log_routing_every: 50,
            out: "runs/default".into(),
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "data_seed",
    "image_size",
    "classes",
    "train_samples",
    "eval_samples",
    "encoder.base_channels",
    "encoder.expansion",
    "encoder.seed",
    "channels",
    "heads",
    "moe.shared",
    "moe.routed",
    "moe.top_k",
    "moe.hidden",
    "moe.layers_per_task",
    "decoder",
    "tasks",
    "aggregator.upsample",
    "head.upsample",
    "lr",
    "weight_decay",
    "momentum",
    "steps",
    "batch_size",
    "mode",
    "log_routing_every",
    "out",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    /// Decoder width after resolving the `0 = 2·C'` default.
    pub fn decoder_channels(&self) -> usize {
        if self.channels == 0 {
            2 * self.encoder.base_channels
        } else {
            self.channels
        }
    }

    /// Tasks that get a branch and head under the current mode.
    pub fn active_tasks(&self) -> Vec<TaskId> {
        match self.mode {
            Mode::Single(t) => vec![t],
            _ => self.tasks.clone(),
        }
    }

    pub fn beta(&self, t: TaskId) -> f64 {
        self.betas.get(&t).copied().unwrap_or_else(|| t.default_beta())
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.active_tasks()
            .into_iter()
            .map(|t| TaskSpec {
                beta: self.beta(t),
                ..TaskSpec::new(t, self.classes, crate::data::PARTS)
            })
            .collect()
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            seed: self.data_seed,
            height: self.image_size,
            width: self.image_size,
            classes: self.classes,
            ..SceneConfig::default()
        }
    }

    /// Encoder settings with the freeze flag implied by the mode.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            frozen: self.mode.encoder_frozen(),
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.moe.validate()?;
        self.encoder.validate()?;
        self.scene().validate()?;
        validate_task_set(&self.tasks)?;
        if let Mode::Single(t) = self.mode {
            if !self.tasks.contains(&t) {
                return Err(Error::Config(format!("single-task mode names {t}, which is not in `tasks`")));
            }
        }
        for s in self.task_specs() {
            s.validate()?;
        }
        for t in self.betas.keys() {
            if !self.tasks.contains(t) {
                return Err(Error::Config(format!("loss weight given for inactive task {t}")));
            }
        }
        let c = self.decoder_channels();
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads {} must divide decoder width {c}", self.heads)));
        }
        if self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::Config("batch_size and train_samples must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr, weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "classes" => self.classes = num(key, v)?,
            "train_samples" => self.train_samples = num(key, v)?,
            "eval_samples" => self.eval_samples = num(key, v)?,
            "encoder.base_channels" => self.encoder.base_channels = num(key, v)?,
            "encoder.expansion" => self.encoder.expansion = num(key, v)?,
            "encoder.seed" => self.encoder.seed = num(key, v)?,
            "channels" => self.channels = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "moe.shared" => self.moe.shared = num(key, v)?,
            "moe.routed" => self.moe.routed = num(key, v)?,
            "moe.top_k" => self.moe.top_k = num(key, v)?,
            "moe.hidden" => self.moe.hidden = num(key, v)?,
            "moe.layers_per_task" => self.moe.layers_per_task = num(key, v)?,
            "decoder" => self.decoder = v.parse()?,
            "tasks" => {
                self.tasks = v
                    .split(',')
                    .map(|t| t.trim().parse())
                    .collect::<Result<Vec<TaskId>>>()?
            }
            "aggregator.upsample" => self.aggregator_upsample = parse_upsample(v)?,
            "head.upsample" => self.head_upsample = parse_upsample(v)?,
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "log_routing_every" => self.log_routing_every = num(key, v)?,
            "out" => self.out = v.to_string(),
            _ => match key.strip_prefix("beta.") {
                Some(t) => {
                    self.betas.insert(t.parse()?, num(key, v)?);
                }
                None => return Err(Error::Config(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serialize to the text form accepted by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("data_seed = {}", self.data_seed),
            format!("image_size = {}", self.image_size),
            format!("classes = {}", self.classes),
            format!("train_samples = {}", self.train_samples),
            format!("eval_samples = {}", self.eval_samples),
            format!("encoder.base_channels = {}", self.encoder.base_channels),
            format!("encoder.expansion = {}", self.encoder.expansion),
            format!("encoder.seed = {}", self.encoder.seed),
            format!("channels = {}", self.channels),
            format!("heads = {}", self.heads),
            format!("moe.shared = {}", self.moe.shared),
            format!("moe.routed = {}", self.moe.routed),
            format!("moe.top_k = {}", self.moe.top_k),
            format!("moe.hidden = {}", self.moe.hidden),
            format!("moe.layers_per_task = {}", self.moe.layers_per_task),
            format!("decoder = {}", self.decoder),
            format!("tasks = {}", tasks.join(",")),
            format!("aggregator.upsample = {}", upsample_name(self.aggregator_upsample)),
            format!("head.upsample = {}", upsample_name(self.head_upsample)),
            format!("lr = {:?}", self.lr),
            format!("weight_decay = {:?}", self.weight_decay),
            format!("momentum = {:?}", self.momentum),
            format!("steps = {}", self.steps),
            format!("batch_size = {}", self.batch_size),
            format!("mode = {}", self.mode),
            format!("log_routing_every = {}", self.log_routing_every),
            format!("out = {}", self.out),
        ];
        for (t, b) in &self.betas {
            lines.push(format!("beta.{t} = {b:?}"));
        }
        debug_assert_eq!(KEYS.len() + self.betas.len(), lines.len());
        lines.join("\n") + "\n"
    }
}
