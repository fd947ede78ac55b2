//! Training checkpoints: every parameter and normalisation buffer under its
//! own name, optimiser velocities under `optim.velocity.<name>`, and a
//! manifest in the container metadata.
//!
//! Augmentation randomness is keyed by `(seed, epoch, sample)`, so the seed
//! and epoch in the manifest are the complete random state of a run.

use std::collections::BTreeMap;
use std::path::Path;

use siamdec_core::model::{Ablation, ModelConfig, SiamDecoder, Variant};
use siamdec_core::optim::{Sgd, SgdConfig};
use siamdec_core::Real;

use crate::container::TensorFile;
use crate::error::{Error, Result};

pub const FORMAT: &str = "siamdec-checkpoint/1";
const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub model: ModelConfig,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimiser steps taken.
    pub step: u64,
    pub seed: u64,
    /// Hash of the effective configuration text.
    pub fingerprint: String,
    /// Effective configuration, as echoed at startup.
    pub config: String,
}

impl Manifest {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self { model, epoch: 0, step: 0, seed, fingerprint: String::new(), config: String::new() }
    }

    fn to_metadata(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let mut out = BTreeMap::new();
        out.insert("format".into(), FORMAT.into());
        out.insert("backbone_id".into(), m.variant.kind().id().into());
        out.insert("variant".into(), m.variant.id().into());
        out.insert("width_divisor".into(), m.width_divisor.to_string());
        out.insert("input_size".into(), m.input_size.to_string());
        for key in Ablation::KEYS {
            out.insert(format!("ablation.{key}"), m.ablation.get(key).expect("known key").to_string());
        }
        out.insert("epoch".into(), self.epoch.to_string());
        out.insert("step".into(), self.step.to_string());
        out.insert("seed".into(), self.seed.to_string());
        out.insert("config_fingerprint".into(), self.fingerprint.clone());
        out.insert("config".into(), self.config.clone());
        out
    }

    fn from_metadata(meta: &BTreeMap<String, String>) -> std::result::Result<Self, String> {
        let get = |k: &str| meta.get(k).ok_or_else(|| format!("manifest lacks `{k}`"));
        let num = |k: &str| -> std::result::Result<u64, String> {
            get(k)?.parse().map_err(|_| format!("manifest `{k}` is not an integer"))
        };
        if get("format")? != FORMAT {
            return Err(format!("unsupported checkpoint format `{}`", get("format")?));
        }
        let variant: Variant = get("variant")?.parse().map_err(|e: siamdec_core::Error| e.to_string())?;
        let mut ablation = Ablation::default();
        for key in Ablation::KEYS {
            let v = get(&format!("ablation.{key}"))?;
            let v = v.parse::<bool>().map_err(|_| format!("manifest `ablation.{key}` is not a boolean"))?;
            ablation.set(key, v).map_err(|e| e.to_string())?;
        }
        Ok(Self {
            model: ModelConfig {
                variant,
                width_divisor: num("width_divisor")? as usize,
                input_size: num("input_size")? as usize,
                ablation,
            },
            epoch: num("epoch")? as usize,
            step: num("step")?,
            seed: num("seed")?,
            fingerprint: get("config_fingerprint")?.clone(),
            config: get("config")?.clone(),
        })
    }
}

pub fn to_file<T: Real>(model: &SiamDecoder<T>, sgd: Option<&Sgd<T>>, manifest: &Manifest) -> TensorFile {
    let mut file = TensorFile::new();
    file.metadata = manifest.to_metadata();
    for (id, entry) in model.params.iter() {
        file.insert(&entry.name, entry.value());
        if let Some(v) = sgd.and_then(|s| s.velocity(id)) {
            file.insert(&format!("{VELOCITY_PREFIX}{}", entry.name), v);
        }
    }
    file
}

pub fn save<T: Real>(path: &Path, model: &SiamDecoder<T>, sgd: Option<&Sgd<T>>, manifest: &Manifest) -> Result<()> {
    to_file(model, sgd, manifest).write(path)
}

pub struct Loaded<T: Real> {
    pub manifest: Manifest,
    pub model: SiamDecoder<T>,
    pub sgd: Sgd<T>,
}

pub fn from_file<T: Real>(file: &TensorFile, sgd: SgdConfig) -> std::result::Result<Loaded<T>, String> {
    let manifest = Manifest::from_metadata(&file.metadata)?;
    let mut model = SiamDecoder::<T>::new(manifest.model, manifest.seed).map_err(|e| e.to_string())?;
    let mut values = Vec::new();
    let mut velocities = Vec::new();
    for name in file.tensors.keys() {
        let t = file.tensor::<T>(name)?;
        match name.strip_prefix(VELOCITY_PREFIX) {
            Some(p) => velocities.push((p.to_string(), t)),
            None => values.push((name.as_str(), t)),
        }
    }
    let missing: Vec<&str> =
        model.params.iter().map(|(_, e)| e.name.as_str()).filter(|n| !file.tensors.contains_key(*n)).collect();
    if !missing.is_empty() {
        return Err(format!("checkpoint lacks parameters: {}", missing.join(", ")));
    }
    model.params.assign(values).map_err(|e| e.to_string())?;
    let mut opt = Sgd::new(sgd, &model.params);
    for (name, v) in velocities {
        let id = model.params.find(&name).ok_or_else(|| format!("velocity for unknown parameter `{name}`"))?;
        if v.shape() != model.params.get(id).shape() {
            return Err(format!(
                "velocity `{name}` has shape {}, parameter has {}",
                v.shape(),
                model.params.get(id).shape()
            ));
        }
        opt.set_velocity(id, v);
    }
    Ok(Loaded { manifest, model, sgd: opt })
}

pub fn load<T: Real>(path: &Path, sgd: SgdConfig) -> Result<Loaded<T>> {
    let file = TensorFile::read(path)?;
    from_file(&file, sgd).map_err(|message| Error::Container { path: path.to_path_buf(), message })
}

#[cfg(test)]
mod tests {
    use super::*;
    use siamdec_core::model::ModelConfig;

    #[test]
    fn manifest_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.ablation.single_decoder = true;
        let mut m = Manifest::new(cfg, 7);
        m.epoch = 3;
        m.step = 42;
        m.fingerprint = "abc".into();
        m.config = "[model]\nbackbone = vgg16\n".into();
        assert_eq!(Manifest::from_metadata(&m.to_metadata()).unwrap(), m);
    }
}
