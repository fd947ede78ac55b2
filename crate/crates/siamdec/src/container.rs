//! Named-tensor container, byte-compatible with the safetensors layout:
//!
//! ```text
//! u64 LE header length | JSON header | tensor bytes
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! (offsets relative to the start of the tensor bytes) and may carry a
//! `"__metadata__"` object of string pairs. Tensors are stored little-endian,
//! sorted by name, and the header is padded with spaces to a multiple of 8
//! bytes, so writing the same content always yields the same bytes.
//!
//! `F32` and `F64` tensors convert to [`Tensor`]; other dtypes (such as the
//! `I64` batch counters in exported torchvision weights) are kept as raw
//! bytes so they can be skipped by name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use siamdec_core::{Real, Shape, Tensor};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    Other(String),
}

impl Dtype {
    fn parse(s: &str) -> Self {
        match s {
            "F32" => Self::F32,
            "F64" => Self::F64,
            other => Self::Other(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::F32 => "F32",
            Self::F64 => "F64",
            Self::Other(s) => s,
        }
    }

    /// Bytes per element, when known.
    pub fn size(&self) -> Option<usize> {
        match self.name() {
            "F64" | "I64" | "U64" => Some(8),
            "F32" | "I32" | "U32" => Some(4),
            "F16" | "BF16" | "I16" | "U16" => Some(2),
            "I8" | "U8" | "BOOL" => Some(1),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, RawTensor>,
}

/// Map stored dimensions onto the engine's NCHW shape. Vectors become
/// per-channel `1×C×1×1` tensors, matching how biases and normalisation
/// parameters are held.
pub fn shape_from_dims(dims: &[usize]) -> Option<Shape> {
    Some(match *dims {
        [] => Shape::scalar(),
        [c] => Shape::new(1, c, 1, 1),
        [n, c] => Shape::new(n, c, 1, 1),
        [c, h, w] => Shape::new(1, c, h, w),
        [n, c, h, w] => Shape::new(n, c, h, w),
        _ => return None,
    })
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store in the tensor's own precision.
    pub fn insert<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let (dtype, bytes) = if std::mem::size_of::<T>() == 4 {
            (Dtype::F32, t.data().iter().flat_map(|v| (v.to_f64() as f32).to_le_bytes()).collect())
        } else {
            (Dtype::F64, t.data().iter().flat_map(|v| v.to_f64().to_le_bytes()).collect())
        };
        self.tensors.insert(name.to_string(), RawTensor { dtype, shape: t.shape().dims().to_vec(), bytes });
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>, String> {
        let raw = self.tensors.get(name).ok_or_else(|| format!("no tensor `{name}`"))?;
        let shape = shape_from_dims(&raw.shape)
            .ok_or_else(|| format!("tensor `{name}` has unsupported rank {}", raw.shape.len()))?;
        let data: Vec<T> = match raw.dtype {
            Dtype::F32 => raw
                .bytes
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => {
                raw.bytes.chunks_exact(8).map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap()))).collect()
            }
            Dtype::Other(ref d) => return Err(format!("tensor `{name}` has non-float dtype {d}")),
        };
        Tensor::from_vec(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            let meta = self.metadata.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
            header.insert(METADATA_KEY.to_string(), serde_json::Value::Object(meta));
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let entry = Entry {
                dtype: t.dtype.name().to_string(),
                shape: t.shape.clone(),
                data_offsets: [offset, offset + t.bytes.len()],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serialises"));
            offset += t.bytes.len();
        }
        let mut json = serde_json::to_vec(&header).expect("header serialises");
        while json.len() % 8 != 0 {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let len = bytes.get(..8).ok_or("file shorter than its 8-byte header length")?;
        let len = u64::from_le_bytes(len.try_into().unwrap());
        let end = usize::try_from(len).ok().and_then(|l| l.checked_add(8)).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| format!("header length {len} exceeds file size {}", bytes.len()))?;
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..end]).map_err(|e| format!("malformed header: {e}"))?;
        let data = &bytes[end..];
        let mut file = Self::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                file.metadata = serde_json::from_value(value).map_err(|e| format!("malformed metadata: {e}"))?;
                continue;
            }
            let entry: Entry =
                serde_json::from_value(value).map_err(|e| format!("tensor `{name}`: malformed entry: {e}"))?;
            let dtype = Dtype::parse(&entry.dtype);
            let [begin, stop] = entry.data_offsets;
            if begin > stop || stop > data.len() {
                return Err(format!(
                    "tensor `{name}` is truncated: declares bytes {begin}..{stop}, file holds {}",
                    data.len()
                ));
            }
            if let Some(size) = dtype.size() {
                let expected = entry.shape.iter().product::<usize>() * size;
                if stop - begin != expected {
                    return Err(format!(
                        "tensor `{name}` is truncated: shape {:?} needs {expected} bytes, found {}",
                        entry.shape,
                        stop - begin
                    ));
                }
            }
            file.tensors.insert(name, RawTensor { dtype, shape: entry.shape, bytes: data[begin..stop].to_vec() });
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Container { path: path.to_path_buf(), message })
    }

    /// Write through a temporary sibling and rename, so a crash never
    /// leaves a half-written file under the final name.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut f = TensorFile::new();
        f.metadata.insert("backbone_id".into(), "vgg16".into());
        f.insert("b", &Tensor::<f32>::from_fn(Shape::new(1, 3, 1, 1), |i| i as f32 * 0.5));
        f.insert("a", &Tensor::<f64>::from_fn(Shape::new(2, 1, 2, 2), |i| -(i as f64) / 3.0));
        let bytes = f.to_bytes();
        assert_eq!(u64::from_le_bytes(bytes[..8].try_into().unwrap()) % 8, 0);
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor::<f64>("a").unwrap().data()[1], -1.0 / 3.0);
    }

    #[test]
    fn truncated_tensor_is_named() {
        let mut f = TensorFile::new();
        f.insert("layer.weight", &Tensor::<f32>::zeros(Shape::new(2, 2, 1, 1)));
        let mut bytes = f.to_bytes();
        bytes.truncate(bytes.len() - 3);
        let err = TensorFile::from_bytes(&bytes).unwrap_err();
        assert!(err.contains("layer.weight") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn vectors_map_to_channels() {
        assert_eq!(shape_from_dims(&[64]), Some(Shape::new(1, 64, 1, 1)));
        assert_eq!(shape_from_dims(&[1, 2, 3, 4, 5]), None);
    }
}
