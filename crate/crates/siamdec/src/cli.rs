//! Command-line interface. Every artifact goes to a run directory
//! `<out>/<timestamp>-<hash>` unless `--run-dir` names one explicitly.
//! Exit status: 0 success, 1 run-time failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;
use sha2::{Digest, Sha256};
use siamdec_core::augment::CorruptionKind;
use siamdec_core::encoder::Stream;
use siamdec_core::metrics::{Aggregate, MetricReport};
use siamdec_core::model::Variant;

use crate::config::{parse_overrides, TrainConfig};
use crate::data::{convert_attribute_table, format_attributes, index_dataset, IndexOptions};
use crate::error::{Error, Result};
use crate::eval::{curve_text, evaluate_dirs, format_table, plot_curves, results_json, EvalOptions};
use crate::fixtures::write_synthetic_dataset;
use crate::runtime::{self, create_dir, evaluate_model, load_model, run_dir_name, ForcedCorruption};

#[derive(Parser, Debug)]
#[command(
    name = "siamdec",
    version,
    about = "RGB-thermal salient object detection with a multi-interactive Siamese decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Output {
    /// Parent directory for the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact output directory, bypassing the timestamped name.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a config file plus `--section.key value` overrides.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (same as `--data.root`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
        /// `--key value` config overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Write one 8-bit PNG prediction per sample.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Refuse checkpoints of another backbone.
        #[arg(long)]
        backbone: Option<Variant>,
        #[arg(long)]
        overwrite: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Score a prediction directory against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Attribute file for per-challenge rows.
        #[arg(long)]
        attributes: Option<PathBuf>,
        #[arg(long)]
        min_max: bool,
        #[command(flatten)]
        output: Output,
    },
    /// PR and F curves for one or more prediction directories.
    Curves {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        /// Series names, in `--pred` order (default: directory names).
        #[arg(long, num_args = 1..)]
        label: Vec<String>,
        #[arg(long)]
        min_max: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Clean versus corrupted-modality metrics for one or more checkpoints.
    CorruptEval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "thermal")]
        modality: ModalityArg,
        #[arg(long, value_enum, default_value = "zero")]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Convert a 0/1 challenge table to `attributes.txt`.
    Attributes {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a seeded synthetic dataset in the RGB/ T/ GT/ layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        width: u32,
        #[arg(long, default_value_t = 80)]
        height: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ModalityArg {
    Rgb,
    Thermal,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum KindArg {
    Zero,
    Noise,
}

fn hash_of(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn resolve_run_dir(output: &Output, fingerprint: &str) -> Result<PathBuf> {
    let dir = output.run_dir.clone().unwrap_or_else(|| output.out.join(run_dir_name(fingerprint)));
    create_dir(&dir)?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} is not a directory", p.display())))
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    output: Output,
    overrides: Vec<String>,
) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &config {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in parse_overrides(&overrides)? {
        cfg.set(&k, &v)?;
    }
    if let Some(d) = data {
        cfg.data_root = Some(d);
    }
    cfg.validate()?;
    let root =
        cfg.data_root.clone().ok_or_else(|| Error::Config("no dataset root: pass --data or set data.root".into()))?;
    require_dir(&root, "dataset root")?;
    println!("effective configuration:\n{}", cfg.to_text());
    let records = index_dataset(
        &root,
        &IndexOptions { split: cfg.split.clone(), attributes: cfg.attributes.clone(), allow_missing_gt: false },
    )?;
    let run_dir = resolve_run_dir(&output, &cfg.fingerprint())?;
    info!("training on {} records into {}", records.len(), run_dir.display());
    let outcome = runtime::train(&cfg, &records, &run_dir, resume.as_deref())?;
    println!("checkpoint: {}", outcome.checkpoint.display());
    if let Some(l) = outcome.last_loss {
        println!("final batch loss: {:.6} after {} steps", l.total, outcome.steps);
    }
    Ok(())
}

fn cmd_infer(
    checkpoint: PathBuf,
    data: PathBuf,
    split: Option<PathBuf>,
    backbone: Option<Variant>,
    overwrite: bool,
    output: Output,
) -> Result<()> {
    require_dir(&data, "dataset root")?;
    let (model, manifest) = load_model(&checkpoint, backbone)?;
    let records = index_dataset(&data, &IndexOptions { split, attributes: None, allow_missing_gt: true })?;
    let run_dir = resolve_run_dir(
        &output,
        &hash_of(&format!("infer|{}|{}|{}", manifest.fingerprint, checkpoint.display(), data.display())),
    )?;
    let written = runtime::infer(&model, &records, &run_dir.join("predictions"), overwrite)?;
    println!("wrote {} predictions to {}", written.len(), run_dir.join("predictions").display());
    Ok(())
}

fn cmd_eval(pred: PathBuf, gt: PathBuf, attributes: Option<PathBuf>, min_max: bool, output: Output) -> Result<()> {
    require_dir(&pred, "prediction directory")?;
    require_dir(&gt, "ground-truth directory")?;
    let eval = evaluate_dirs(&pred, &gt, &EvalOptions { attributes: attributes.clone(), min_max })?;
    for u in &eval.unmatched {
        log::warn!("unmatched file {u}");
    }
    let run_dir = resolve_run_dir(
        &output,
        &hash_of(&format!("eval|{}|{}|{attributes:?}|{min_max}", pred.display(), gt.display())),
    )?;
    let table = format_table(&eval.report);
    print!("{table}");
    write(&run_dir.join("table.txt"), &table)?;
    write(&run_dir.join("results.json"), &serde_json::to_string_pretty(&results_json(&eval)).expect("json"))?;
    if let Some(a) = &eval.report.aggregate {
        write(&run_dir.join("curve.txt"), &curve_text(&a.curve))?;
    }
    println!("results in {}", run_dir.display());
    Ok(())
}

fn cmd_curves(gt: PathBuf, preds: Vec<PathBuf>, labels: Vec<String>, min_max: bool, output: Output) -> Result<()> {
    require_dir(&gt, "ground-truth directory")?;
    if !labels.is_empty() && labels.len() != preds.len() {
        return Err(Error::Usage(format!("{} labels for {} prediction directories", labels.len(), preds.len())));
    }
    let run_dir =
        resolve_run_dir(&output, &hash_of(&format!("curves|{}|{preds:?}|{labels:?}|{min_max}", gt.display())))?;
    let mut series = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        require_dir(p, "prediction directory")?;
        let label = labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| p.file_name().map_or(format!("series{i}"), |n| n.to_string_lossy().into_owned()));
        let eval = evaluate_dirs(p, &gt, &EvalOptions { attributes: None, min_max })?;
        let agg = eval
            .report
            .aggregate
            .ok_or_else(|| Error::Runtime(format!("{}: no image could be scored", p.display())))?;
        let file = format!("curve_{i:02}_{}.txt", label.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_"));
        write(&run_dir.join(file), &curve_text(&agg.curve))?;
        println!("{label}: maxF {:.3}", agg.max_f);
        series.push((label, agg.curve.to_vec()));
    }
    plot_curves(&run_dir.join("curves.svg"), &series)?;
    println!("curves in {}", run_dir.display());
    Ok(())
}

fn metric_rows(clean: &Aggregate, bad: &Aggregate) -> Vec<(&'static str, f64, f64)> {
    vec![
        ("MAE", clean.mae, bad.mae),
        ("Fm", clean.fm_adaptive, bad.fm_adaptive),
        ("maxF", clean.max_f, bad.max_f),
        ("Sm", clean.sm, bad.sm),
        ("Em", clean.em, bad.em),
        ("wF", clean.wf, bad.wf),
    ]
}

fn aggregate_of(r: &MetricReport) -> Result<Aggregate> {
    r.aggregate.ok_or_else(|| Error::Runtime("no image could be scored".into()))
}

fn cmd_corrupt_eval(
    checkpoints: Vec<PathBuf>,
    data: PathBuf,
    split: Option<PathBuf>,
    forced: ForcedCorruption,
    output: Output,
) -> Result<()> {
    require_dir(&data, "dataset root")?;
    let records = index_dataset(&data, &IndexOptions { split, attributes: None, allow_missing_gt: false })?;
    let key = format!("corrupt|{checkpoints:?}|{}|{forced:?}", data.display());
    let run_dir = resolve_run_dir(&output, &hash_of(&key))?;
    let mut table = format!(
        "corruption: {} {} (seed {})\n{:<28}{:<6}{:>9}{:>11}{:>9}\n",
        forced.modality.name(),
        forced.kind.name(),
        forced.seed,
        "checkpoint",
        "metric",
        "clean",
        "corrupted",
        "delta"
    );
    let mut records_json = Vec::new();
    for ckpt in &checkpoints {
        let (model, _) = load_model(ckpt, None)?;
        let clean = aggregate_of(&evaluate_model(&model, &records, None)?)?;
        let bad = aggregate_of(&evaluate_model(&model, &records, Some(forced))?)?;
        let name = ckpt.display().to_string();
        let short: String = name.chars().rev().take(26).collect::<Vec<_>>().into_iter().rev().collect();
        for (metric, c, b) in metric_rows(&clean, &bad) {
            table.push_str(&format!("{short:<28}{metric:<6}{c:>9.4}{b:>11.4}{:>+9.4}\n", b - c));
            records_json
                .push(json!({"checkpoint": name, "metric": metric, "clean": c, "corrupted": b, "delta": b - c}));
        }
    }
    print!("{table}");
    write(&run_dir.join("corrupt_eval.txt"), &table)?;
    write(&run_dir.join("corrupt_eval.json"), &serde_json::to_string_pretty(&records_json).expect("json"))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, resume, output, overrides } => {
            cmd_train(config, data, resume, output, overrides)
        }
        Command::Infer { checkpoint, data, split, backbone, overwrite, output } => {
            cmd_infer(checkpoint, data, split, backbone, overwrite, output)
        }
        Command::Eval { pred, gt, attributes, min_max, output } => cmd_eval(pred, gt, attributes, min_max, output),
        Command::Curves { gt, pred, label, min_max, output } => cmd_curves(gt, pred, label, min_max, output),
        Command::CorruptEval { checkpoint, data, split, modality, kind, seed, output } => {
            let forced = ForcedCorruption {
                modality: match modality {
                    ModalityArg::Rgb => Stream::Rgb,
                    ModalityArg::Thermal => Stream::Thermal,
                },
                kind: match kind {
                    KindArg::Zero => CorruptionKind::Zero,
                    KindArg::Noise => CorruptionKind::Noise,
                },
                seed,
            };
            cmd_corrupt_eval(checkpoint, data, split, forced, output)
        }
        Command::Attributes { table, output } => {
            let text = fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?;
            let map = convert_attribute_table(&text)?;
            write(&output, &format_attributes(&map))?;
            println!("{} ids written to {}", map.len(), output.display());
            Ok(())
        }
        Command::Synth { out, count, width, height, seed } => {
            let ids = write_synthetic_dataset(&out, count, width, height, seed)?;
            println!("{} samples written to {}", ids.len(), out.display());
            Ok(())
        }
    }
}

/// Parse and run; returns the process exit status.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
