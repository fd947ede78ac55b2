//! Paired RGB-thermal datasets.
//!
//! The default layout is `root/RGB/`, `root/T/` and `root/GT/` with shared
//! file stems. A `manifest.txt` in the root (lines
//! `id<TAB>rgb<TAB>thermal<TAB>gt`, paths relative to the root) overrides the
//! convention. Challenge attributes come from `attributes.txt`, lines
//! `id<TAB>TAG1,TAG2,...`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use siamdec_core::kernels::{resize_bilinear, resize_nearest};
use siamdec_core::train::Batch;
use siamdec_core::{Shape, Tensor};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ATTRIBUTES_FILE: &str = "attributes.txt";
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Challenge and image-quality tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Bso,
    Sso,
    Mso,
    Li,
    Cb,
    Cib,
    Sa,
    Tc,
    Ic,
    Of,
    Bw,
    BadRgb,
    BadT,
}

impl Attribute {
    pub const ALL: [Attribute; 13] = [
        Self::Bso,
        Self::Sso,
        Self::Mso,
        Self::Li,
        Self::Cb,
        Self::Cib,
        Self::Sa,
        Self::Tc,
        Self::Ic,
        Self::Of,
        Self::Bw,
        Self::BadRgb,
        Self::BadT,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Bso => "BSO",
            Self::Sso => "SSO",
            Self::Mso => "MSO",
            Self::Li => "LI",
            Self::Cb => "CB",
            Self::Cib => "CIB",
            Self::Sa => "SA",
            Self::Tc => "TC",
            Self::Ic => "IC",
            Self::Of => "OF",
            Self::Bw => "BW",
            Self::BadRgb => "BadRGB",
            Self::BadT => "BadT",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    /// Case-insensitive; spaces, dashes and underscores are ignored, so
    /// `Bad RGB` and `bad_rgb` both parse.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| !matches!(c, ' ' | '-' | '_')).collect::<String>().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|a| a.tag().to_ascii_uppercase() == key)
            .ok_or_else(|| Error::Data(format!("unknown attribute tag `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub rgb_path: PathBuf,
    pub thermal_path: PathBuf,
    /// Absent only for inference-only corpora.
    pub gt_path: Option<PathBuf>,
    pub attributes: BTreeSet<Attribute>,
}

impl SampleRecord {
    pub fn tags(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.tag().to_string()).collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Lines with comments (`#`) and surrounding blanks removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// `id → tags` from an attributes file.
pub fn parse_attributes(text: &str) -> Result<BTreeMap<String, BTreeSet<Attribute>>> {
    let mut out = BTreeMap::new();
    for (n, line) in content_lines(text) {
        let (id, tags) = line.split_once('\t').unwrap_or((line, ""));
        let set = tags.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect::<Result<_>>();
        let set = set.map_err(|e| Error::Data(format!("attributes line {n}: {e}")))?;
        if out.insert(id.trim().to_string(), set).is_some() {
            return Err(Error::Data(format!("attributes line {n}: duplicate id `{id}`")));
        }
    }
    Ok(out)
}

pub fn format_attributes(map: &BTreeMap<String, BTreeSet<Attribute>>) -> String {
    let mut out = String::new();
    for (id, tags) in map {
        let tags: Vec<&str> = tags.iter().map(|t| t.tag()).collect();
        out.push_str(&format!("{id}\t{}\n", tags.join(",")));
    }
    out
}

/// Convert a challenge table (one header row naming the attribute columns,
/// then `id` followed by 0/1 flags per column; comma, semicolon or tab
/// separated) to the attributes map. Columns whose header is not a known tag
/// are ignored.
pub fn convert_attribute_table(text: &str) -> Result<BTreeMap<String, BTreeSet<Attribute>>> {
    let mut lines = content_lines(text);
    let (_, header) = lines.next().ok_or_else(|| Error::Data("attribute table is empty".into()))?;
    let sep = [',', ';', '\t'].into_iter().max_by_key(|&c| header.matches(c).count()).expect("non-empty");
    let columns: Vec<Option<Attribute>> = header.split(sep).skip(1).map(|h| h.trim().parse().ok()).collect();
    if columns.iter().all(Option::is_none) {
        return Err(Error::Data(format!("attribute table header names no known tag: `{header}`")));
    }
    let mut out = BTreeMap::new();
    for (n, line) in lines {
        let mut cells = line.split(sep).map(str::trim);
        let id = cells.next().unwrap_or_default();
        let id = Path::new(id).file_stem().and_then(|s| s.to_str()).unwrap_or(id).to_string();
        let mut tags = BTreeSet::new();
        for (cell, col) in cells.zip(&columns) {
            let Some(a) = col else { continue };
            match cell {
                "" | "0" => {}
                "1" => {
                    tags.insert(*a);
                }
                other => return Err(Error::Data(format!("attribute table line {n}: flag `{other}` is not 0 or 1"))),
            }
        }
        out.insert(id, tags);
    }
    Ok(out)
}

/// `stem → path` for the images in a directory.
fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::Data(format!(
                    "id `{stem}` has two files: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct IndexOptions {
    /// File listing the ids to keep, one per line.
    pub split: Option<PathBuf>,
    /// Attribute file; defaults to `root/attributes.txt` when present.
    pub attributes: Option<PathBuf>,
    /// Accept samples without ground truth (inference).
    pub allow_missing_gt: bool,
}

/// Index a dataset root into records sorted by id.
pub fn index_dataset(root: &Path, opts: &IndexOptions) -> Result<Vec<SampleRecord>> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let manifest = root.join(MANIFEST_FILE);
    let mut records = if manifest.is_file() {
        records_from_manifest(root, &read_text(&manifest)?)?
    } else {
        records_from_layout(root, opts.allow_missing_gt)?
    };
    if let Some(split) = &opts.split {
        let keep: BTreeSet<String> = content_lines(&read_text(split)?).map(|(_, l)| l.to_string()).collect();
        let known: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        if let Some(missing) = keep.iter().find(|id| !known.contains(id.as_str())) {
            return Err(Error::Data(format!("split {} names unknown id `{missing}`", split.display())));
        }
        records.retain(|r| keep.contains(&r.id));
    }
    let attr_path = opts.attributes.clone().or_else(|| Some(root.join(ATTRIBUTES_FILE)).filter(|p| p.is_file()));
    if let Some(path) = attr_path {
        let attrs = parse_attributes(&read_text(&path)?)?;
        for r in &mut records {
            if let Some(tags) = attrs.get(&r.id) {
                r.attributes = tags.clone();
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no samples under {}", root.display())));
    }
    Ok(records)
}

fn records_from_layout(root: &Path, allow_missing_gt: bool) -> Result<Vec<SampleRecord>> {
    let rgb = images_by_stem(&root.join("RGB"))?;
    let thermal = images_by_stem(&root.join("T"))?;
    let gt_dir = root.join("GT");
    let gt = if gt_dir.is_dir() || !allow_missing_gt { images_by_stem(&gt_dir)? } else { BTreeMap::new() };
    let ids: BTreeSet<&String> = rgb.keys().chain(thermal.keys()).chain(gt.keys()).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let missing: Vec<&str> = [
            ("RGB", rgb.contains_key(id)),
            ("T", thermal.contains_key(id)),
            ("GT", gt.contains_key(id) || allow_missing_gt),
        ]
        .into_iter()
        .filter(|(_, present)| !present)
        .map(|(d, _)| d)
        .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("sample `{id}` has no file in {}", missing.join(", "))));
        }
        out.push(SampleRecord {
            id: id.clone(),
            rgb_path: rgb[id].clone(),
            thermal_path: thermal[id].clone(),
            gt_path: gt.get(id).cloned(),
            attributes: BTreeSet::new(),
        });
    }
    Ok(out)
}

fn records_from_manifest(root: &Path, text: &str) -> Result<Vec<SampleRecord>> {
    let mut out = BTreeMap::new();
    for (n, line) in content_lines(text) {
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [id, rgb, thermal, gt] = f[..] else {
            return Err(Error::Data(format!("manifest line {n}: expected id, rgb, thermal and gt separated by tabs")));
        };
        let paths = [rgb, thermal, gt].map(|p| root.join(p));
        if let Some(p) = paths.iter().find(|p| !p.is_file()) {
            return Err(Error::Data(format!("sample `{id}`: missing file {}", p.display())));
        }
        let [rgb_path, thermal_path, gt_path] = paths;
        let record = SampleRecord {
            id: id.to_string(),
            rgb_path,
            thermal_path,
            gt_path: Some(gt_path),
            attributes: BTreeSet::new(),
        };
        if out.insert(id.to_string(), record).is_some() {
            return Err(Error::Data(format!("manifest line {n}: duplicate id `{id}`")));
        }
    }
    Ok(out.into_values().collect())
}

/// One loaded sample: `1×3×S×S` images in `[0, 1]` and a `1×1×S×S` binary
/// mask, plus the original ground-truth (or RGB) size.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
    pub original_size: (usize, usize),
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// RGB image as a `1×3×H×W` tensor in `[0, 1]`; grayscale files are
/// replicated to three channels.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Grayscale image as a `1×1×H×W` tensor in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_vec(Shape::new(1, 1, h, w), img.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
        .map_err(Error::from)
}

/// Resize a gray mask with nearest neighbour and threshold at 0.5.
pub fn binarize_mask(gray: &Tensor<f32>, size: usize) -> Tensor<f32> {
    resize_nearest(gray, size, size).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Load a record at `size × size`: bilinear for the images, nearest plus
/// thresholding for the mask.
pub fn load_sample(record: &SampleRecord, size: usize) -> Result<Sample> {
    let rgb = read_rgb(&record.rgb_path)?;
    let thermal = read_rgb(&record.thermal_path)?;
    let gt = record.gt_path.as_deref().map(read_gray).transpose()?;
    let reference = gt.as_ref().map_or(rgb.shape(), Tensor::shape);
    Ok(Sample {
        id: record.id.clone(),
        rgb: resize_bilinear(&rgb, size, size),
        thermal: resize_bilinear(&thermal, size, size),
        mask: gt.as_ref().map(|g| binarize_mask(g, size)),
        original_size: (reference.h, reference.w),
    })
}

/// Load samples in parallel; results keep the order of `records`.
pub fn load_samples(records: &[&SampleRecord], size: usize) -> Result<Vec<Sample>> {
    records.par_iter().map(|r| load_sample(r, size)).collect()
}

/// Stack samples that all carry masks into a batch.
pub fn collate(samples: &[Sample]) -> Result<Batch<f32>> {
    let masks = samples
        .iter()
        .map(|s| s.mask.clone().ok_or_else(|| Error::Data(format!("sample `{}` has no ground truth", s.id))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        rgb: Tensor::stack(&samples.iter().map(|s| s.rgb.clone()).collect::<Vec<_>>())?,
        thermal: Tensor::stack(&samples.iter().map(|s| s.thermal.clone()).collect::<Vec<_>>())?,
        mask: Tensor::stack(&masks)?,
    })
}

/// Index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
