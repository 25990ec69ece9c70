//! Run configuration: a flat `key = value` file format, its parser, and the
//! resolved echo that writes a config back out such that re-parsing it
//! reproduces the same [`RunConfig`] bit for bit.
//!
//! Format rules:
//! - one `key = value` pair per line;
//! - `#` starts a comment (whole-line or trailing);
//! - blank lines are ignored;
//! - unknown keys, duplicate keys, and malformed values are errors, reported
//!   with their line number;
//! - every key is optional — omitted keys take the defaults below.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::agent::ArchConfig;
use crate::env::synthetic::SyntheticKind;
use crate::env::{
    load_image_directory, DataSource, EnvError, ImageShape, ResizeMethod, RewardKind, RewardMode,
    RewardSpec,
};
use crate::nn::OptAlgo;
use crate::rng::{mix, streams};
use crate::tensor::tape::Act;
use crate::trainer::TrainSettings;
use crate::Elem;

/// A config file problem: either tied to a specific line, or a
/// whole-config validation failure.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Which family of images a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic(SyntheticKind),
    Directory,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "directory" => Ok(DatasetKind::Directory),
            other => SyntheticKind::parse(other)
                .map(DatasetKind::Synthetic)
                .map_err(|e| e.to_string()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic(kind) => kind.name(),
            DatasetKind::Directory => "directory",
        }
    }
}

/// Every knob a run exposes. One field per config key; the `Default` impl
/// is the single source of truth for default values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Image geometry.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    // Network geometry.
    pub levels: usize,
    pub widths: Vec<usize>,
    pub z_dim: usize,
    pub skips: bool,
    pub activation: Act,
    // Episode and discounting.
    pub horizon: usize,
    pub gamma: f64,
    pub tau: f64,
    // Learning rates.
    pub lr_dl: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub lr_alpha: f64,
    // Loss weights.
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    // Replay and batching.
    pub batch: usize,
    pub capacity: usize,
    pub min_buffer: usize,
    pub grad_steps: usize,
    // Reward shaping.
    pub reward: RewardKind,
    pub reward_mode: RewardMode,
    pub reward_scale: f64,
    // Data.
    pub dataset: DatasetKind,
    pub data_dir: String,
    pub train_fraction: f64,
    pub resize: ResizeMethod,
    // Optimization extras.
    pub optimizer: OptAlgo,
    pub grad_clip: f64,
    pub init_log_alpha: f64,
    // Run control.
    pub iterations: u64,
    pub seed: u64,
    pub out_dir: String,
    pub checkpoint_interval: u64,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let settings = TrainSettings::default_desk(0);
        let arch = settings.arch.clone();
        RunConfig {
            channels: arch.c,
            height: arch.h,
            width: arch.w,
            levels: arch.levels,
            widths: arch.widths,
            z_dim: arch.z_dim,
            skips: arch.skips_enabled,
            activation: arch.activation,
            horizon: settings.horizon,
            gamma: settings.gamma,
            tau: settings.tau,
            lr_dl: settings.lr_dl,
            lr_q: settings.lr_q,
            lr_pi: settings.lr_pi,
            lr_alpha: settings.lr_alpha,
            lambda_rec: settings.lambda_rec,
            lambda_adv: settings.lambda_adv,
            batch: settings.batch,
            capacity: settings.capacity,
            min_buffer: settings.min_buffer,
            grad_steps: settings.grad_steps,
            reward: settings.reward.kind,
            reward_mode: settings.reward.mode,
            reward_scale: settings.reward.scale,
            dataset: DatasetKind::Synthetic(SyntheticKind::Stripes),
            data_dir: String::new(),
            train_fraction: 0.9,
            resize: ResizeMethod::Bilinear,
            optimizer: settings.optimizer,
            grad_clip: settings.grad_clip,
            init_log_alpha: settings.init_log_alpha,
            iterations: 300,
            seed: 0,
            out_dir: "out".to_string(),
            checkpoint_interval: 100,
            eval_episodes: 64,
        }
    }
}

fn parse_as<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("bad {what} `{value}`: {e}"))
}

/// Set one key on a config; `Err` carries a message without a line number
/// (the caller attaches it).
fn apply(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "channels" => cfg.channels = parse_as(value, "integer")?,
        "height" => cfg.height = parse_as(value, "integer")?,
        "width" => cfg.width = parse_as(value, "integer")?,
        "levels" => cfg.levels = parse_as(value, "integer")?,
        "widths" => {
            cfg.widths = value
                .split(',')
                .map(|tok| parse_as(tok.trim(), "width"))
                .collect::<Result<Vec<usize>, String>>()?;
        }
        "z_dim" => cfg.z_dim = parse_as(value, "integer")?,
        "skips" => cfg.skips = parse_as(value, "boolean (true/false)")?,
        "activation" => {
            cfg.activation = Act::parse(value).ok_or_else(|| {
                format!(
                    "unknown activation `{value}` \
                     (expected relu, leaky_relu, tanh, sigmoid, or softplus)"
                )
            })?;
        }
        "horizon" => cfg.horizon = parse_as(value, "integer")?,
        "gamma" => cfg.gamma = parse_as(value, "number")?,
        "tau" => cfg.tau = parse_as(value, "number")?,
        "lr_dl" => cfg.lr_dl = parse_as(value, "number")?,
        "lr_q" => cfg.lr_q = parse_as(value, "number")?,
        "lr_pi" => cfg.lr_pi = parse_as(value, "number")?,
        "lr_alpha" => cfg.lr_alpha = parse_as(value, "number")?,
        "lambda_rec" => cfg.lambda_rec = parse_as(value, "number")?,
        "lambda_adv" => cfg.lambda_adv = parse_as(value, "number")?,
        "batch" => cfg.batch = parse_as(value, "integer")?,
        "capacity" => cfg.capacity = parse_as(value, "integer")?,
        "min_buffer" => cfg.min_buffer = parse_as(value, "integer")?,
        "grad_steps" => cfg.grad_steps = parse_as(value, "integer")?,
        "reward" => cfg.reward = RewardKind::parse(value).map_err(|e| e.to_string())?,
        "reward_mode" => cfg.reward_mode = RewardMode::parse(value).map_err(|e| e.to_string())?,
        "reward_scale" => cfg.reward_scale = parse_as(value, "number")?,
        "dataset" => cfg.dataset = DatasetKind::parse(value)?,
        "data_dir" => cfg.data_dir = value.to_string(),
        "train_fraction" => cfg.train_fraction = parse_as(value, "number")?,
        "resize" => cfg.resize = ResizeMethod::parse(value).map_err(|e| e.to_string())?,
        "optimizer" => {
            cfg.optimizer = match value {
                "adam" => OptAlgo::adam_default(),
                "sgd" => OptAlgo::Sgd,
                other => {
                    return Err(format!(
                        "unknown optimizer `{other}` (expected adam or sgd)"
                    ))
                }
            };
        }
        "grad_clip" => cfg.grad_clip = parse_as(value, "number")?,
        "init_log_alpha" => cfg.init_log_alpha = parse_as(value, "number")?,
        "iterations" => cfg.iterations = parse_as(value, "integer")?,
        "seed" => cfg.seed = parse_as(value, "integer")?,
        "out_dir" => cfg.out_dir = value.to_string(),
        "checkpoint_interval" => cfg.checkpoint_interval = parse_as(value, "integer")?,
        "eval_episodes" => cfg.eval_episodes = parse_as(value, "integer")?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// Parse config text. Unset keys keep their defaults; the result is
/// validated before being returned.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Line {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Line {
                line: line_no,
                msg: format!("duplicate key `{key}`"),
            });
        }
        apply(&mut cfg, key, value).map_err(|msg| ConfigError::Line { line: line_no, msg })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl RunConfig {
    /// Whole-config consistency checks, beyond per-value syntax.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.to_settings()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.dataset == DatasetKind::Directory && self.data_dir.is_empty() {
            return Err(ConfigError::Invalid(
                "dataset = directory requires data_dir to be set".to_string(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.eval_episodes == 0 {
            return Err(ConfigError::Invalid(
                "eval_episodes must be at least 1".to_string(),
            ));
        }
        if self.out_dir.is_empty() {
            return Err(ConfigError::Invalid(
                "out_dir must not be empty".to_string(),
            ));
        }
        Ok(())
    }

    /// The trainer-facing view of this config.
    pub fn to_settings(&self) -> TrainSettings {
        TrainSettings {
            arch: ArchConfig {
                c: self.channels,
                h: self.height,
                w: self.width,
                levels: self.levels,
                widths: self.widths.clone(),
                z_dim: self.z_dim,
                skips_enabled: self.skips,
                activation: self.activation,
            },
            gamma: self.gamma,
            tau: self.tau,
            lr_dl: self.lr_dl,
            lr_q: self.lr_q,
            lr_pi: self.lr_pi,
            lr_alpha: self.lr_alpha,
            lambda_rec: self.lambda_rec,
            lambda_adv: self.lambda_adv,
            batch: self.batch,
            capacity: self.capacity,
            min_buffer: self.min_buffer,
            grad_steps: self.grad_steps,
            horizon: self.horizon,
            reward: RewardSpec {
                kind: self.reward,
                mode: self.reward_mode,
                scale: self.reward_scale,
            },
            master_seed: self.seed,
            optimizer: self.optimizer,
            grad_clip: self.grad_clip,
            init_log_alpha: self.init_log_alpha,
        }
    }

    /// Build the episode data source. Synthetic sources are free; directory
    /// sources scan and decode `data_dir` up front.
    pub fn data_source(&self) -> Result<DataSource<Elem>, EnvError> {
        let shape = ImageShape::new(self.channels, self.height, self.width);
        match self.dataset {
            DatasetKind::Synthetic(kind) => Ok(DataSource::Synthetic { kind, shape }),
            DatasetKind::Directory => load_image_directory(
                Path::new(&self.data_dir),
                shape,
                self.resize,
                self.train_fraction,
                mix(self.seed, streams::DATASET, 0),
            ),
        }
    }

    /// Render the fully resolved config as text. Parsing the result yields
    /// a config equal to `self` (floats round-trip via shortest-decimal
    /// formatting).
    pub fn to_config_string(&self) -> String {
        let widths = self
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let optimizer = match self.optimizer {
            OptAlgo::Adam { .. } => "adam",
            OptAlgo::Sgd => "sgd",
        };
        let mut s = String::new();
        let _ = writeln!(s, "# resolved run configuration");
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "widths = {widths}");
        let _ = writeln!(s, "z_dim = {}", self.z_dim);
        let _ = writeln!(s, "skips = {}", self.skips);
        let _ = writeln!(s, "activation = {}", self.activation.name());
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "lr_dl = {}", self.lr_dl);
        let _ = writeln!(s, "lr_q = {}", self.lr_q);
        let _ = writeln!(s, "lr_pi = {}", self.lr_pi);
        let _ = writeln!(s, "lr_alpha = {}", self.lr_alpha);
        let _ = writeln!(s, "lambda_rec = {}", self.lambda_rec);
        let _ = writeln!(s, "lambda_adv = {}", self.lambda_adv);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "capacity = {}", self.capacity);
        let _ = writeln!(s, "min_buffer = {}", self.min_buffer);
        let _ = writeln!(s, "grad_steps = {}", self.grad_steps);
        let _ = writeln!(s, "reward = {}", self.reward.name());
        let _ = writeln!(s, "reward_mode = {}", self.reward_mode.name());
        let _ = writeln!(s, "reward_scale = {}", self.reward_scale);
        let _ = writeln!(s, "dataset = {}", self.dataset.name());
        let _ = writeln!(s, "data_dir = {}", self.data_dir);
        let _ = writeln!(s, "train_fraction = {}", self.train_fraction);
        let _ = writeln!(s, "resize = {}", self.resize.name());
        let _ = writeln!(s, "optimizer = {optimizer}");
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "init_log_alpha = {}", self.init_log_alpha);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        s
    }
}
