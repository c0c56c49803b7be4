//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. A `preset` key, wherever it
//! appears, is applied first; the remaining keys are applied in file order and
//! command-line overrides last. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::adapter::{ShortcutKind, DEFAULT_REDUCTION, DEFAULT_SHORTCUT_GAIN};
use crate::binary::{AdapterConfig, Arch, ModelConfig, ScaleMode};
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, OptimizerSettings};
use crate::surrogate::{SurrogateSpec, DEFAULT_OMEGA};
use crate::train::data::DatasetKind;
use crate::train::schedule::{LrSchedule, ScheduleSetting};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Fixed,
    RampFromOne,
    RampFromNs,
}

impl ScheduleKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(ScheduleKind::Fixed),
            "ramp_one" => Some(ScheduleKind::RampFromOne),
            "ramp_ns" => Some(ScheduleKind::RampFromNs),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScheduleKind::Fixed => "fixed",
            ScheduleKind::RampFromOne => "ramp_one",
            ScheduleKind::RampFromNs => "ramp_ns",
        }
    }
}

/// Which operands of each binary layer get a noise adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterPlacement {
    None,
    Weights,
    Activations,
    Both,
}

impl AdapterPlacement {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "off" | "false" => Some(AdapterPlacement::None),
            "weights" => Some(AdapterPlacement::Weights),
            "activations" | "acts" => Some(AdapterPlacement::Activations),
            "both" | "on" | "true" => Some(AdapterPlacement::Both),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AdapterPlacement::None => "none",
            AdapterPlacement::Weights => "weights",
            AdapterPlacement::Activations => "activations",
            AdapterPlacement::Both => "both",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `ste`, `ste_gated`, `fda`, `tanh` or `signswish`.
    pub surrogate: String,
    pub omega: f64,
    pub beta: f64,
    pub schedule_kind: ScheduleKind,
    pub n_s: usize,
    /// Terminal term count; `None` means `2·n_s`.
    pub n_p: Option<usize>,
    pub adapter: AdapterPlacement,
    pub adapter_reduction: usize,
    pub shortcut: ShortcutKind,
    pub shortcut_gain: f64,
    pub alpha0: f64,
    pub weight_scale: ScaleMode,
    pub act_scale: ScaleMode,
    pub seed: u64,
    pub augment: bool,
    /// Use only the first N training / test samples (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub output_dir: PathBuf,
    /// Write wall time into the `seconds` column; `false` writes 0 so that
    /// the metrics file is a pure function of config and seed.
    pub record_time: bool,
}

pub const PRESETS: &[&str] = &[
    "mnist-toycnn",
    "cifar10-resnet20",
    "cifar10-vggsmall",
    "imagenet-optimizer",
];

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            arch: Arch::ToyCnn,
            epochs: 5,
            batch_size: 128,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            weight_decay: 0.0,
            surrogate: "fda".into(),
            omega: DEFAULT_OMEGA,
            beta: 5.0,
            schedule_kind: ScheduleKind::RampFromNs,
            n_s: 2,
            n_p: None,
            adapter: AdapterPlacement::None,
            adapter_reduction: DEFAULT_REDUCTION,
            shortcut: ShortcutKind::Sine,
            shortcut_gain: DEFAULT_SHORTCUT_GAIN,
            alpha0: 0.1,
            weight_scale: ScaleMode::LayerMean,
            act_scale: ScaleMode::None,
            seed: 0,
            augment: false,
            train_limit: 0,
            test_limit: 0,
            output_dir: PathBuf::from("runs/default"),
            record_time: true,
        }
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn split_line(line: &str) -> Result<Option<(String, String)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key = value, got '{line}'")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

/// `key = value` pairs of a config text, in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines().filter_map(|l| split_line(l).transpose()).collect()
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let d = TrainConfig::default();
        let cifar = TrainConfig {
            dataset: DatasetKind::Cifar10,
            data_dir: PathBuf::from("data/cifar10"),
            arch: Arch::ResNet20,
            epochs: 400,
            batch_size: 128,
            lr: 0.1,
            lr_schedule: LrSchedule::Cosine,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 1e-4,
            n_s: 10,
            adapter: AdapterPlacement::Both,
            augment: true,
            ..d.clone()
        };
        match name {
            "mnist-toycnn" => Ok(d),
            "cifar10-resnet20" => Ok(cifar),
            "cifar10-vggsmall" => Ok(TrainConfig {
                arch: Arch::VggSmall,
                ..cifar
            }),
            "imagenet-optimizer" => Ok(TrainConfig {
                optimizer: OptimizerKind::Adam,
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 0.0,
                ..cifar
            }),
            _ => Err(Error::Config(format!(
                "unknown preset '{name}' (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a config file body, then applies `overrides` (`key=value`).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for o in overrides {
            pairs.push(split_line(o)?.ok_or_else(|| Error::Config(format!("empty override '{o}'")))?);
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, name)) => Self::preset(name)?,
            None => Self::default(),
        };
        for (k, v) in pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = DatasetKind::parse(v).ok_or_else(|| Error::Config(format!("unknown dataset '{v}'")))?
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "arch" => self.arch = Arch::parse(v).ok_or_else(|| Error::Config(format!("unknown arch '{v}'")))?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => match v.strip_prefix("step:").and_then(|r| r.split_once(':')) {
                        Some((every, gamma)) => LrSchedule::Step {
                            every: parse_num(key, every)?,
                            gamma: parse_num(key, gamma)?,
                        },
                        None => return Err(Error::Config(format!("lr_schedule: unknown '{v}'"))),
                    },
                }
            }
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::Config(format!("unknown optimizer '{v}'"))),
                }
            }
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "surrogate" => self.surrogate = v.to_string(),
            "omega" => self.omega = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "schedule" => {
                self.schedule_kind =
                    ScheduleKind::parse(v).ok_or_else(|| Error::Config(format!("unknown schedule '{v}'")))?
            }
            "n_s" => self.n_s = parse_num(key, v)?,
            "n_p" => self.n_p = Some(parse_num(key, v)?),
            "adapter" => {
                self.adapter =
                    AdapterPlacement::parse(v).ok_or_else(|| Error::Config(format!("adapter: unknown '{v}'")))?
            }
            "adapter_reduction" => self.adapter_reduction = parse_num(key, v)?,
            "shortcut" => {
                self.shortcut =
                    ShortcutKind::parse(v).ok_or_else(|| Error::Config(format!("shortcut: unknown '{v}'")))?
            }
            "shortcut_gain" => self.shortcut_gain = parse_num(key, v)?,
            "alpha0" => self.alpha0 = parse_num(key, v)?,
            "weight_scale" | "act_scale" => {
                let m = ScaleMode::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown '{v}'")))?;
                if key == "weight_scale" {
                    self.weight_scale = m;
                } else {
                    self.act_scale = m;
                }
            }
            "seed" => self.seed = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "train_limit" => self.train_limit = parse_num(key, v)?,
            "test_limit" => self.test_limit = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "record_time" => self.record_time = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return fail("weight_decay and alpha0 must be >= 0".into());
        }
        if self.adapter_reduction == 0 {
            return fail("adapter_reduction must be >= 1".into());
        }
        self.schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.surrogate_spec()?;
        Ok(())
    }

    /// The surrogate at the schedule's starting term count.
    pub fn surrogate_spec(&self) -> Result<SurrogateSpec> {
        let spec = match self.surrogate.as_str() {
            "ste" => SurrogateSpec::Ste { gated: false },
            "ste_gated" => SurrogateSpec::Ste { gated: true },
            "fda" => SurrogateSpec::Fda {
                terms: self.schedule().start(),
                omega: self.omega,
            },
            "tanh" => SurrogateSpec::TanhAlike { beta: self.beta },
            "signswish" => SurrogateSpec::SignSwish { beta: self.beta },
            other => return Err(Error::Config(format!("unknown surrogate '{other}'"))),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn schedule(&self) -> ScheduleSetting {
        let n_p = self.n_p.unwrap_or(2 * self.n_s);
        match self.schedule_kind {
            ScheduleKind::Fixed => ScheduleSetting::Fixed { n_p },
            ScheduleKind::RampFromOne => ScheduleSetting::RampFromOne { n_p },
            ScheduleKind::RampFromNs => ScheduleSetting::RampFromNs { n_s: self.n_s, n_p },
        }
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        let mut s = match self.optimizer {
            OptimizerKind::Sgd => OptimizerSettings::sgd(self.lr, self.momentum, self.weight_decay),
            OptimizerKind::Adam => OptimizerSettings::adam(self.lr, self.weight_decay),
        };
        s.momentum = self.momentum;
        s
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let surrogate = self.surrogate_spec()?;
        let adapter = AdapterConfig {
            reduction: self.adapter_reduction,
            shortcut: self.shortcut,
            gain: self.shortcut_gain,
        };
        let (on_w, on_a) = match self.adapter {
            AdapterPlacement::None => (false, false),
            AdapterPlacement::Weights => (true, false),
            AdapterPlacement::Activations => (false, true),
            AdapterPlacement::Both => (true, true),
        };
        Ok(ModelConfig {
            arch: self.arch,
            in_channels: self.dataset.channels(),
            image_size: self.dataset.image_size(),
            num_classes: 10,
            weight_surrogate: surrogate,
            act_surrogate: surrogate,
            weight_adapter: on_w.then_some(adapter),
            act_adapter: on_a.then_some(adapter),
            weight_scale: self.weight_scale,
            act_scale: self.act_scale,
        })
    }

    /// Canonical `key = value` text that parses back to this config.
    pub fn to_text(&self) -> String {
        let lr_schedule = match self.lr_schedule {
            LrSchedule::Constant => "constant".to_string(),
            LrSchedule::Cosine => "cosine".to_string(),
            LrSchedule::Step { every, gamma } => format!("step:{every}:{gamma}"),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", self.dataset.label().into());
        kv("data_dir", self.data_dir.display().to_string());
        kv("arch", self.arch.label().into());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_schedule", lr_schedule);
        kv(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .into(),
        );
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("surrogate", self.surrogate.clone());
        kv("omega", self.omega.to_string());
        kv("beta", self.beta.to_string());
        kv("schedule", self.schedule_kind.label().into());
        kv("n_s", self.n_s.to_string());
        if let Some(n_p) = self.n_p {
            kv("n_p", n_p.to_string());
        }
        kv("adapter", self.adapter.label().into());
        kv("adapter_reduction", self.adapter_reduction.to_string());
        kv("shortcut", self.shortcut.label().into());
        kv("shortcut_gain", self.shortcut_gain.to_string());
        kv("alpha0", self.alpha0.to_string());
        kv("weight_scale", self.weight_scale.label().into());
        kv("act_scale", self.act_scale.label().into());
        kv("seed", self.seed.to_string());
        kv("augment", self.augment.to_string());
        kv("train_limit", self.train_limit.to_string());
        kv("test_limit", self.test_limit.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("record_time", self.record_time.to_string());
        s
    }
}
