//! Pretrained backbone weights.
//!
//! A backbone file is a [`TensorFile`] whose metadata declares
//! `backbone_id` (`vgg16` or `resnet50`) and whose tensors use the
//! torchvision state-dict names (`features.0.weight`, `layer1.0.conv1.weight`,
//! `bn1.running_mean`, ...). Classifier tensors and batch counters are
//! ignored. A torchvision model exports to this format with
//! `safetensors.torch.save_file(model.state_dict(), path, metadata={"backbone_id": "vgg16"})`.

use std::path::Path;

use siamdec_core::encoder::BackboneKind;
use siamdec_core::model::SiamDecoder;
use siamdec_core::{Real, Tensor};

use crate::container::TensorFile;
use crate::error::{Error, Result};

pub const BACKBONE_KEY: &str = "backbone_id";

fn ignored(name: &str) -> bool {
    name.starts_with("fc.") || name.starts_with("classifier.") || name.ends_with("num_batches_tracked")
}

/// Read a backbone file, checking that it was exported for `kind`.
pub fn read_backbone<T: Real>(path: &Path, kind: BackboneKind) -> Result<Vec<(String, Tensor<T>)>> {
    let file = TensorFile::read(path)?;
    let err = |message: String| Error::Container { path: path.to_path_buf(), message };
    match file.metadata.get(BACKBONE_KEY) {
        Some(id) if id == kind.id() => {}
        Some(id) => return Err(err(format!("backbone_id `{id}` does not match requested `{}`", kind.id()))),
        None => return Err(err(format!("metadata lacks `{BACKBONE_KEY}`"))),
    }
    file.tensors.keys().filter(|n| !ignored(n)).map(|n| Ok((n.clone(), file.tensor::<T>(n).map_err(err)?))).collect()
}

/// Initialise both encoder streams from one backbone file; returns the
/// number of tensors assigned.
pub fn load_pretrained<T: Real>(model: &mut SiamDecoder<T>, path: &Path) -> Result<usize> {
    let tensors = read_backbone::<T>(path, model.config.variant.kind())?;
    Ok(model.load_backbone(tensors.iter().map(|(n, t)| (n.as_str(), t)))?)
}

/// Write one stream's encoder under backbone names, in the format
/// [`load_pretrained`] reads.
pub fn export_backbone<T: Real>(model: &SiamDecoder<T>, path: &Path) -> Result<()> {
    let prefix = "encoder.rgb.";
    let mut file = TensorFile::new();
    file.metadata.insert(BACKBONE_KEY.into(), model.config.variant.kind().id().into());
    for (_, entry) in model.params.iter() {
        if let Some(name) = entry.name.strip_prefix(prefix) {
            file.insert(name, entry.value());
        }
    }
    file.write(path)
}
