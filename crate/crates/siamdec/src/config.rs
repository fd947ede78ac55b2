//! Training configuration and its text format.
//!
//! One `key = value` per line. `[section]` headers prefix the keys that
//! follow them, so `[train]` then `epochs = 5` sets `train.epochs`; fully
//! dotted keys work anywhere. `#` starts a comment. Unknown keys and
//! repeated keys are errors.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! command-line `--key value` overrides in the order given.

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use siamdec_core::augment::{CorruptionPolicy, CorruptionStage};
use siamdec_core::losses::LossConfig;
use siamdec_core::model::{Ablation, ModelConfig, Variant};
use siamdec_core::optim::{LrSchedule, SgdConfig};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(first epoch, lr)` pairs, epochs counted from 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub sgd: SgdConfig,
    /// Encoder learning rate as a multiple of the schedule's.
    pub backbone_lr_scale: f64,
    pub flip_prob: f64,
    pub seed: u64,
    pub corruption: CorruptionPolicy,
    pub loss: LossConfig,
    /// Evaluate on the held-out shard every this many epochs (0: never).
    pub eval_every: usize,
    /// Number of records (the last in id order) held out from training.
    pub holdout: usize,
    pub pretrained: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::full(Variant::Vgg16),
            batch_size: 4,
            epochs: 100,
            lr_schedule: LrSchedule::standard().steps().to_vec(),
            sgd: SgdConfig::default(),
            backbone_lr_scale: 1.0,
            flip_prob: 0.5,
            seed: 0,
            corruption: CorruptionPolicy::default(),
            loss: LossConfig::default(),
            eval_every: 5,
            holdout: 0,
            pretrained: None,
            data_root: None,
            split: None,
            attributes: None,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "model.backbone",
    "model.input_size",
    "model.width_divisor",
    "ablation.branch_supervision",
    "ablation.global_interaction",
    "ablation.modality_interaction",
    "ablation.single_decoder",
    "ablation.share_branch_weights",
    "train.batch_size",
    "train.epochs",
    "train.lr_schedule",
    "train.momentum",
    "train.weight_decay",
    "train.backbone_lr_scale",
    "train.flip_prob",
    "train.seed",
    "train.eval_every",
    "train.holdout",
    "train.pretrained",
    "corruption.p_corrupt",
    "corruption.p_pick_rgb",
    "corruption.p_zero_vs_noise",
    "corruption.stage",
    "corruption.clip_noise",
    "loss.alpha",
    "loss.smoothness_weight",
    "loss.eps",
    "loss.psi_floor",
    "data.root",
    "data.split",
    "data.attributes",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_schedule(value: &str) -> Result<Vec<(usize, f64)>> {
    let steps = value
        .split(',')
        .map(|s| {
            let (e, lr) =
                s.split_once(':').ok_or_else(|| Error::Config(format!("schedule entry `{s}` is not epoch:lr")))?;
            Ok((parse("train.lr_schedule", e.trim())?, parse("train.lr_schedule", lr.trim())?))
        })
        .collect::<Result<Vec<_>>>()?;
    LrSchedule::new(steps.clone())?;
    Ok(steps)
}

impl TrainConfig {
    /// Reduced model for smoke runs: widths ÷8 at 64×64, batch 4.
    pub fn tiny() -> Self {
        Self { model: ModelConfig::tiny(), epochs: 2, eval_every: 1, ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.backbone" => self.model.variant = v.parse()?,
            "model.input_size" => self.model.input_size = parse(key, v)?,
            "model.width_divisor" => self.model.width_divisor = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.lr_schedule" => self.lr_schedule = parse_schedule(v)?,
            "train.momentum" => self.sgd.momentum = parse(key, v)?,
            "train.weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "train.backbone_lr_scale" => self.backbone_lr_scale = parse(key, v)?,
            "train.flip_prob" => self.flip_prob = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            "train.holdout" => self.holdout = parse(key, v)?,
            "train.pretrained" => self.pretrained = path(v),
            "corruption.p_corrupt" => self.corruption.p_corrupt = parse(key, v)?,
            "corruption.p_pick_rgb" => self.corruption.p_pick_rgb = parse(key, v)?,
            "corruption.p_zero_vs_noise" => self.corruption.p_zero_vs_noise = parse(key, v)?,
            "corruption.stage" => {
                self.corruption.stage = match v {
                    "raw" => CorruptionStage::Raw,
                    "normalized" => CorruptionStage::Normalized,
                    _ => return Err(Error::Config(format!("`{key}` must be raw or normalized, got `{v}`"))),
                }
            }
            "corruption.clip_noise" => self.corruption.clip_noise = parse(key, v)?,
            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.smoothness_weight" => self.loss.beta = parse(key, v)?,
            "loss.eps" => self.loss.eps = parse(key, v)?,
            "loss.psi_floor" => self.loss.psi_floor = parse(key, v)?,
            "data.root" => self.data_root = path(v),
            "data.split" => self.split = path(v),
            "data.attributes" => self.attributes = path(v),
            _ => match key.strip_prefix("ablation.") {
                Some(flag) if Ablation::KEYS.contains(&flag) => self.model.ablation.set(flag, parse(key, v)?)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "model.backbone" => m.variant.id().to_string(),
            "model.input_size" => m.input_size.to_string(),
            "model.width_divisor" => m.width_divisor.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.lr_schedule" => {
                self.lr_schedule.iter().map(|(e, lr)| format!("{e}:{lr:e}")).collect::<Vec<_>>().join(",")
            }
            "train.momentum" => self.sgd.momentum.to_string(),
            "train.weight_decay" => format!("{:e}", self.sgd.weight_decay),
            "train.backbone_lr_scale" => self.backbone_lr_scale.to_string(),
            "train.flip_prob" => self.flip_prob.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.holdout" => self.holdout.to_string(),
            "train.pretrained" => show_path(&self.pretrained),
            "corruption.p_corrupt" => self.corruption.p_corrupt.to_string(),
            "corruption.p_pick_rgb" => self.corruption.p_pick_rgb.to_string(),
            "corruption.p_zero_vs_noise" => self.corruption.p_zero_vs_noise.to_string(),
            "corruption.stage" => match self.corruption.stage {
                CorruptionStage::Raw => "raw".into(),
                CorruptionStage::Normalized => "normalized".into(),
            },
            "corruption.clip_noise" => self.corruption.clip_noise.to_string(),
            "loss.alpha" => self.loss.alpha.to_string(),
            "loss.smoothness_weight" => self.loss.beta.to_string(),
            "loss.eps" => format!("{:e}", self.loss.eps),
            "loss.psi_floor" => format!("{:e}", self.loss.psi_floor),
            "data.root" => show_path(&self.data_root),
            "data.split" => show_path(&self.split),
            "data.attributes" => show_path(&self.attributes),
            _ => m.ablation.get(key.strip_prefix("ablation.")?)?.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LrSchedule::new(self.lr_schedule.clone())?;
        self.corruption.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must be a probability, got {}", self.flip_prob)));
        }
        if !(self.backbone_lr_scale >= 0.0) {
            return Err(Error::Config("backbone_lr_scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Apply a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
            if !seen.insert(key.clone()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            self.set(&key, v).map_err(|e| {
                Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: ")))
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Canonical text of every key; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (s, k) = key.split_once('.').expect("dotted key");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {}\n", self.get(key).expect("known key")));
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Parse `--key value` override pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").ok_or_else(|| Error::Usage(format!("expected `--key value`, found `{a}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let v = it.next().ok_or_else(|| Error::Usage(format!("`--{key}` needs a value")))?;
        out.push((key.to_string(), v.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = TrainConfig::tiny();
        c.set("ablation.single_decoder", "true").unwrap();
        c.set("train.lr_schedule", "0:0.05,3:0.005").unwrap();
        c.data_root = Some("/data/vt".into());
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn sections_and_errors() {
        let c = TrainConfig::from_text("[train]\nepochs = 3 # short\nmodel.input_size = 64\n").unwrap();
        assert_eq!((c.epochs, c.model.input_size), (3, 64));
        assert!(TrainConfig::from_text("[train]\nepoch = 3\n").unwrap_err().to_string().contains("train.epoch"));
        assert!(TrainConfig::from_text("train.epochs = 3\ntrain.epochs = 4\n").is_err());
        assert!(TrainConfig::from_text("train.lr_schedule = 5:0.1\n").is_err());
    }

    #[test]
    fn overrides() {
        let args: Vec<String> = ["--ablation.single_decoder", "true", "--train.epochs=2"].map(String::from).to_vec();
        let o = parse_overrides(&args).unwrap();
        assert_eq!(o, [("ablation.single_decoder".into(), "true".into()), ("train.epochs".into(), "2".into())]);
        assert!(parse_overrides(&["--x".to_string()]).is_err());
    }
}
