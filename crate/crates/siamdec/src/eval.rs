//! Dataset evaluation from saved maps, and its report formats: a text table,
//! a JSON results file, 20-row curve files and an SVG curve plot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use rayon::prelude::*;
use serde_json::{json, Value};
use siamdec_core::metrics::{Aggregate, CurvePoint, ImageMetrics, Mask, MetricAccumulator, MetricReport, SaliencyMap};

use crate::data::{parse_attributes, read_gray, Attribute};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Attribute file for per-challenge rows.
    pub attributes: Option<PathBuf>,
    /// Rescale each prediction to span `[0, 1]` before scoring.
    pub min_max: bool,
}

pub struct DatasetEvaluation {
    pub report: MetricReport,
    /// Files present on only one side, as `pred:<name>` or `gt:<name>`.
    pub unmatched: Vec<String>,
}

/// 8-bit prediction values to a map in `[0, 1]`.
pub fn map_from_bytes(h: usize, w: usize, bytes: &[u8]) -> SaliencyMap {
    SaliencyMap::new(h, w, bytes.iter().map(|&v| v as f64 / 255.0).collect()).expect("bytes map into [0, 1]")
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn load_pair(pred: &Path, gt: &Path, min_max: bool) -> Result<siamdec_core::Result<ImageMetrics>> {
    let s = read_gray(pred)?;
    let y = read_gray(gt)?;
    let (ss, ys) = (s.shape(), y.shape());
    if (ss.h, ss.w) != (ys.h, ys.w) {
        return Ok(Err(siamdec_core::Error::Input(format!(
            "prediction {}x{} vs ground truth {}x{}",
            ss.h, ss.w, ys.h, ys.w
        ))));
    }
    // Re-derive the 8-bit values so scores use exact k/255 levels.
    let bytes: Vec<u8> = s.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let mut map = map_from_bytes(ss.h, ss.w, &bytes);
    if min_max {
        map = map.min_max_normalized();
    }
    let gray: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let mask = Mask::from_gray(ys.h, ys.w, &gray)?;
    Ok(ImageMetrics::evaluate(&map, &mask))
}

/// Score every prediction that has a same-stem ground-truth file.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<DatasetEvaluation> {
    let preds = stems(pred_dir)?;
    let gts = stems(gt_dir)?;
    let mut unmatched: Vec<String> =
        preds.keys().filter(|k| !gts.contains_key(*k)).map(|k| format!("pred:{k}")).collect();
    unmatched.extend(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("gt:{k}")));
    let ids: Vec<&String> = preds.keys().filter(|k| gts.contains_key(*k)).collect();
    if ids.is_empty() {
        return Err(Error::Runtime(format!(
            "no prediction in {} matches a ground-truth file in {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let attrs = match &opts.attributes {
        Some(p) => parse_attributes(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    let results: Vec<_> =
        ids.par_iter().map(|id| load_pair(&preds[*id], &gts[*id], opts.min_max)).collect::<Result<_>>()?;
    let mut acc = MetricAccumulator::new();
    for (id, r) in ids.iter().zip(results) {
        let tags: Vec<String> =
            attrs.get(*id).map(|s| s.iter().map(|a| a.tag().to_string()).collect()).unwrap_or_default();
        acc.add_result(id, &tags, r);
    }
    Ok(DatasetEvaluation { report: acc.finish(), unmatched })
}

const COLUMNS: &str = "    Em     Sm     Fm   maxF    MAE     wF";

fn row(label: &str, a: &Aggregate) -> String {
    format!(
        "{label:<10}{:>6}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}",
        a.count, a.em, a.sm, a.fm_adaptive, a.max_f, a.mae, a.wf
    )
}

/// Aggregate row, then one row per attribute present, in canonical tag order.
pub fn format_table(report: &MetricReport) -> String {
    let mut out = format!("{:<10}{:>6}{COLUMNS}\n", "subset", "n");
    match &report.aggregate {
        Some(a) => out.push_str(&row("all", a)),
        None => out.push_str("all       (no image could be scored)"),
    }
    out.push('\n');
    let known: BTreeSet<&str> = Attribute::ALL.iter().map(|a| a.tag()).collect();
    let ordered = Attribute::ALL
        .iter()
        .map(|a| a.tag())
        .chain(report.groups.keys().map(String::as_str).filter(|k| !known.contains(k)));
    for tag in ordered {
        if let Some(a) = report.groups.get(tag) {
            out.push_str(&row(tag, a));
            out.push('\n');
        }
    }
    if !report.skipped.is_empty() {
        let _ = writeln!(out, "skipped {} image(s)", report.skipped.len());
    }
    out
}

fn aggregate_json(a: &Aggregate) -> Value {
    json!({
        "count": a.count, "mae": a.mae, "fm_adaptive": a.fm_adaptive, "max_f": a.max_f,
        "wf": a.wf, "sm": a.sm, "em": a.em,
    })
}

/// One record per image, the aggregate, attribute groups, and everything
/// that was not scored.
pub fn results_json(eval: &DatasetEvaluation) -> Value {
    let r = &eval.report;
    let images: Vec<Value> = r
        .per_image
        .iter()
        .map(|(id, m)| {
            json!({
                "id": id, "mae": m.mae, "fm_adaptive": m.fm_adaptive, "max_f": m.max_f(),
                "wf": m.wf, "sm": m.sm, "em": m.em,
            })
        })
        .collect();
    json!({
        "images": images,
        "aggregate": r.aggregate.as_ref().map(aggregate_json),
        "groups": r.groups.iter().map(|(k, a)| (k.clone(), aggregate_json(a))).collect::<serde_json::Map<_, _>>(),
        "skipped": r.skipped.iter().map(|s| json!({"id": s.id, "reason": s.reason})).collect::<Vec<_>>(),
        "unmatched": eval.unmatched,
    })
}

/// 20 rows of `k threshold precision recall f`.
pub fn curve_text(curve: &[CurvePoint]) -> String {
    let mut out = String::from("# k threshold precision recall f\n");
    for (k, p) in curve.iter().enumerate() {
        let _ = writeln!(out, "{k} {:.4} {:.10} {:.10} {:.10}", p.threshold, p.precision, p.recall, p.f);
    }
    out
}

/// PR curves (left) and F against threshold index (right), one labelled
/// series per input.
pub fn plot_curves(path: &Path, series: &[(String, Vec<CurvePoint>)]) -> Result<()> {
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (1000, 450)).into_drawing_area();
        root.fill(&WHITE)?;
        let (left, right) = root.split_horizontally(500);
        let mut pr = ChartBuilder::on(&left)
            .caption("Precision-recall", ("sans-serif", 20))
            .margin(15)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(0.0..1.0, 0.0..1.0)?;
        pr.configure_mesh().x_desc("recall").y_desc("precision").draw()?;
        let n = series.first().map_or(0, |s| s.1.len());
        let mut fc = ChartBuilder::on(&right)
            .caption("F-measure by threshold", ("sans-serif", 20))
            .margin(15)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(0.0..n.max(1) as f64 - 1.0, 0.0..1.0)?;
        fc.configure_mesh().x_desc("threshold index").y_desc("F").draw()?;
        for (i, (label, curve)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            pr.draw_series(LineSeries::new(curve.iter().map(|p| (p.recall, p.precision)), color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            fc.draw_series(LineSeries::new(
                curve.iter().enumerate().map(|(k, p)| (k as f64, p.f)),
                color.stroke_width(2),
            ))?;
        }
        pr.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Runtime(format!("plot {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_file_has_twenty_rows() {
        let y = Mask::new(1, 4, vec![true, false, true, false]).unwrap();
        let s = map_from_bytes(1, 4, &[255, 0, 200, 30]);
        let m = ImageMetrics::evaluate(&s, &y).unwrap();
        let text = curve_text(&m.curve);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 20);
    }
}
