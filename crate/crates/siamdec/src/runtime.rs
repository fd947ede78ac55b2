//! Training loop, inference to image files, and model evaluation with
//! optional forced modality corruption.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::{info, warn};
use serde_json::json;
use siamdec_core::augment::{
    augment_sample, replace_image, sample_rng, CorruptionKind, CorruptionRecord, CorruptionStage,
};
use siamdec_core::encoder::Stream;
use siamdec_core::kernels::resize_bilinear;
use siamdec_core::losses::LossBreakdown;
use siamdec_core::metrics::{Mask, MetricAccumulator, MetricReport};
use siamdec_core::model::{SiamDecoder, Variant};
use siamdec_core::optim::LrSchedule;
use siamdec_core::train::Trainer;
use siamdec_core::{Shape, Tensor};

use crate::checkpoint::{self, Manifest};
use crate::config::TrainConfig;
use crate::data::{batch_indices, collate, load_samples, read_gray, Sample, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::map_from_bytes;
use crate::weights::load_pretrained;

pub const LOG_FILE: &str = "train.log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
const EVAL_CORRUPT_DOMAIN: u64 = 0x6576_616c_0000_0000;

/// `<YYYYmmdd-HHMMSS>-<first 12 hex digits of the fingerprint>`.
pub fn run_dir_name(fingerprint: &str) -> String {
    format!("{}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), &fingerprint[..fingerprint.len().min(12)])
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Final saliency of one sample as 8-bit values at its original size.
pub fn predict_bytes(model: &SiamDecoder<f32>, sample: &Sample) -> Result<(usize, usize, Vec<u8>)> {
    let sf = model.predict(&sample.rgb, &sample.thermal)?;
    let (h, w) = sample.original_size;
    let full = resize_bilinear(&sf, h, w);
    Ok((h, w, full.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()))
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub last_loss: Option<LossBreakdown>,
    pub steps: u64,
}

struct Log(BufWriter<File>, PathBuf);

impl Log {
    fn open(path: PathBuf) -> Result<Self> {
        let f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self(BufWriter::new(f), path))
    }

    fn write(&mut self, v: serde_json::Value) -> Result<()> {
        writeln!(self.0, "{v}").and_then(|_| self.0.flush()).map_err(|e| Error::io(&self.1, e))
    }
}

fn corruption_json(id: &str, r: CorruptionRecord) -> Option<serde_json::Value> {
    match r {
        CorruptionRecord::None => None,
        CorruptionRecord::Replaced { modality, kind } => {
            Some(json!({"id": id, "modality": modality.name(), "kind": kind.name()}))
        }
    }
}

fn report_json(r: &MetricReport) -> serde_json::Value {
    match &r.aggregate {
        Some(a) => {
            json!({"count": a.count, "mae": a.mae, "fm_adaptive": a.fm_adaptive, "max_f": a.max_f, "wf": a.wf, "sm": a.sm, "em": a.em})
        }
        None => json!(null),
    }
}

/// Train on `records`, writing the log, echoed config and per-epoch
/// checkpoints under `run_dir`. With `resume`, parameters, momentum and the
/// epoch counter continue from that checkpoint.
pub fn train(
    cfg: &TrainConfig,
    records: &[SampleRecord],
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.holdout >= records.len() {
        return Err(Error::Config(format!(
            "holdout {} leaves no training records out of {}",
            cfg.holdout,
            records.len()
        )));
    }
    let (train_set, holdout) = records.split_at(records.len() - cfg.holdout);
    let schedule = LrSchedule::new(cfg.lr_schedule.clone())?;
    let ckpt_dir = run_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let text = cfg.to_text();
    fs::write(run_dir.join(CONFIG_FILE), &text).map_err(|e| Error::io(run_dir.join(CONFIG_FILE), e))?;

    let mut manifest = Manifest::new(cfg.model, cfg.seed);
    manifest.fingerprint = cfg.fingerprint();
    manifest.config = text;
    let mut trainer = match resume {
        Some(path) => {
            let loaded = checkpoint::load::<f32>(path, cfg.sgd)?;
            if loaded.manifest.model != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            manifest.epoch = loaded.manifest.epoch;
            let mut t = Trainer::new(loaded.model, cfg.sgd, cfg.loss);
            t.sgd = loaded.sgd;
            t.step = loaded.manifest.step;
            t
        }
        None => {
            let mut model = SiamDecoder::<f32>::new(cfg.model, cfg.seed)?;
            if let Some(p) = &cfg.pretrained {
                let n = load_pretrained(&mut model, p)?;
                info!("loaded {n} pretrained tensors from {}", p.display());
            }
            Trainer::new(model, cfg.sgd, cfg.loss)
        }
    };
    let mut policy = cfg.corruption;
    policy.seed = cfg.seed;
    let mut log = Log::open(run_dir.join(LOG_FILE))?;
    let mut last_loss = None;
    let mut checkpoint_path = run_dir.join(LAST_CHECKPOINT);

    for epoch in manifest.epoch..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        for batch_idx in batch_indices(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let refs: Vec<&SampleRecord> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let mut samples = load_samples(&refs, cfg.model.input_size)?;
            let mut events = Vec::new();
            let mut flipped = 0;
            for (s, &i) in samples.iter_mut().zip(&batch_idx) {
                let mask = s
                    .mask
                    .as_mut()
                    .ok_or_else(|| Error::Data(format!("training sample `{}` has no ground truth", s.id)))?;
                let rec =
                    augment_sample(&mut s.rgb, &mut s.thermal, mask, &policy, cfg.flip_prob, epoch as u64, i as u64);
                flipped += rec.flipped as usize;
                events.extend(corruption_json(&s.id, rec.corruption));
            }
            let batch = collate(&samples)?;
            let loss = match trainer.train_step_scaled(&batch, lr, cfg.backbone_lr_scale) {
                Ok(l) => l,
                Err(siamdec_core::Error::NonFiniteLoss(msg)) => {
                    let dump = run_dir.join("nonfinite.json");
                    let body = json!({"epoch": epoch, "step": trainer.step, "lr": lr, "ids": batch.ids, "detail": msg});
                    fs::write(&dump, body.to_string()).map_err(|e| Error::io(&dump, e))?;
                    return Err(Error::Runtime(format!(
                        "non-finite loss at epoch {epoch}, step {}: {msg} (dump: {})",
                        trainer.step,
                        dump.display()
                    )));
                }
                Err(e) => return Err(e.into()),
            };
            log.write(json!({
                "epoch": epoch, "step": trainer.step, "lr": lr,
                "l_d": loss.l_d, "l_g": loss.l_g, "l_f": loss.l_f, "l_s": loss.l_s, "total": loss.total,
                "ids": batch.ids, "flipped": flipped, "corruption": events,
            }))?;
            last_loss = Some(loss);
        }
        manifest.epoch = epoch + 1;
        manifest.step = trainer.step;
        let file = checkpoint::to_file(&trainer.model, Some(&trainer.sgd), &manifest);
        file.write(&ckpt_dir.join(format!("epoch_{:03}.safetensors", epoch + 1)))?;
        checkpoint_path = run_dir.join(LAST_CHECKPOINT);
        file.write(&checkpoint_path)?;
        info!("epoch {} done: step {}, loss {:?}", epoch + 1, trainer.step, last_loss.map(|l| l.total));
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !holdout.is_empty() {
            let report = evaluate_model(&trainer.model, holdout, None)?;
            log.write(json!({"epoch": epoch + 1, "eval": report_json(&report)}))?;
        }
    }
    Ok(TrainOutcome { checkpoint: checkpoint_path, last_loss, steps: trainer.step })
}

/// Write one 8-bit grayscale PNG per record, named by id, at the record's
/// original resolution. Existing files are an error unless `overwrite`.
pub fn infer(
    model: &SiamDecoder<f32>,
    records: &[SampleRecord],
    out_dir: &Path,
    overwrite: bool,
) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let paths: Vec<PathBuf> = records.iter().map(|r| out_dir.join(format!("{}.png", r.id))).collect();
    if !overwrite {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Runtime(format!("{} exists; pass --overwrite to replace it", p.display())));
        }
    }
    for (chunk, out) in records.chunks(8).zip(paths.chunks(8)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        for (sample, path) in load_samples(&refs, model.config.input_size)?.iter().zip(out) {
            let (h, w, bytes) = predict_bytes(model, sample)?;
            let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches size");
            img.save(path).map_err(|source| Error::Image { path: path.clone(), source })?;
        }
    }
    Ok(paths)
}

/// Replace one modality of every evaluated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForcedCorruption {
    pub modality: Stream,
    pub kind: CorruptionKind,
    pub seed: u64,
}

fn corrupt(sample: &mut Sample, c: ForcedCorruption, index: usize) {
    let mut rng = sample_rng(c.seed, EVAL_CORRUPT_DOMAIN, 0, index as u64);
    let target = match c.modality {
        Stream::Rgb => &mut sample.rgb,
        Stream::Thermal => &mut sample.thermal,
    };
    replace_image(target, c.kind, CorruptionStage::Raw, false, &mut rng);
}

/// Score the model's 8-bit predictions against the original-resolution
/// ground truth, as file-based evaluation would.
pub fn evaluate_model(
    model: &SiamDecoder<f32>,
    records: &[SampleRecord],
    corruption: Option<ForcedCorruption>,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for (c, chunk) in records.chunks(8).enumerate() {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        for (j, (mut sample, rec)) in load_samples(&refs, model.config.input_size)?.into_iter().zip(chunk).enumerate() {
            let Some(gt_path) = &rec.gt_path else {
                warn!("`{}` has no ground truth; not evaluated", rec.id);
                continue;
            };
            if let Some(f) = corruption {
                corrupt(&mut sample, f, c * 8 + j);
            }
            let (h, w, bytes) = predict_bytes(model, &sample)?;
            let gt = read_gray(gt_path)?;
            let gray: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
            let result = Mask::from_gray(gt.shape().h, gt.shape().w, &gray)
                .and_then(|y| siamdec_core::metrics::ImageMetrics::evaluate(&map_from_bytes(h, w, &bytes), &y));
            acc.add_result(&rec.id, &rec.tags(), result);
        }
    }
    Ok(acc.finish())
}

/// Load a checkpoint for inference, checking the backbone when one is
/// requested.
pub fn load_model(path: &Path, expect: Option<Variant>) -> Result<(SiamDecoder<f32>, Manifest)> {
    let loaded = checkpoint::load::<f32>(path, Default::default())?;
    if let Some(v) = expect {
        if v != loaded.manifest.model.variant {
            return Err(Error::Config(format!(
                "checkpoint {} holds a {} model, not {v}",
                path.display(),
                loaded.manifest.model.variant
            )));
        }
    }
    Ok((loaded.model, loaded.manifest))
}

/// Zero inputs, for smoke checks that need a well-formed sample.
pub fn blank_sample(size: usize) -> Sample {
    Sample {
        id: "blank".into(),
        rgb: Tensor::zeros(Shape::new(1, 3, size, size)),
        thermal: Tensor::zeros(Shape::new(1, 3, size, size)),
        mask: None,
        original_size: (size, size),
    }
}
