//! Per-image evaluation and dataset aggregation, optionally grouped by
//! challenge attribute.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::Result;
use crate::real::pairwise_sum_by;

use super::{
    adaptive_f_measure, e_measure, mae, pr_curve, s_measure, weighted_f_measure, CurvePoint, Mask, SaliencyMap,
    CURVE_POINTS,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub mae: f64,
    pub fm_adaptive: f64,
    pub wf: f64,
    pub sm: f64,
    pub em: f64,
    pub curve: [CurvePoint; CURVE_POINTS],
}

impl ImageMetrics {
    pub fn evaluate(s: &SaliencyMap, y: &Mask) -> Result<Self> {
        Ok(Self {
            mae: mae(s, y)?,
            fm_adaptive: adaptive_f_measure(s, y)?,
            wf: weighted_f_measure(s, y)?,
            sm: s_measure(s, y)?,
            em: e_measure(s, y)?,
            curve: pr_curve(s, y)?,
        })
    }

    pub fn max_f(&self) -> f64 {
        self.curve.iter().map(|p| p.f).fold(0.0, f64::max)
    }
}

/// Means over a set of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub mae: f64,
    pub fm_adaptive: f64,
    pub wf: f64,
    pub sm: f64,
    pub em: f64,
    /// Pointwise mean precision, recall and F over images.
    pub curve: [CurvePoint; CURVE_POINTS],
    /// Maximum of the mean F curve.
    pub max_f: f64,
}

impl Aggregate {
    fn of(items: &[&ImageMetrics]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| pairwise_sum_by(items.len(), |i| f(items[i])) / n;
        let mut curve = items[0].curve;
        for (k, p) in curve.iter_mut().enumerate() {
            p.precision = mean(&|m| m.curve[k].precision);
            p.recall = mean(&|m| m.curve[k].recall);
            p.f = mean(&|m| m.curve[k].f);
        }
        Some(Self {
            count: items.len(),
            mae: mean(&|m| m.mae),
            fm_adaptive: mean(&|m| m.fm_adaptive),
            wf: mean(&|m| m.wf),
            sm: mean(&|m| m.sm),
            em: mean(&|m| m.em),
            max_f: curve.iter().map(|p| p.f).fold(0.0, f64::max),
            curve,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: BTreeMap<String, ImageMetrics>,
    /// `None` when no image could be evaluated.
    pub aggregate: Option<Aggregate>,
    /// Per-attribute means over the images carrying each tag.
    pub groups: BTreeMap<String, Aggregate>,
    pub skipped: Vec<Skipped>,
}

/// Collects per-image results; the report does not depend on insertion order.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    images: BTreeMap<String, (ImageMetrics, Vec<String>)>,
    skipped: BTreeMap<String, String>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluate one image; undefined measures (empty foreground, size
    /// mismatch) record the image as skipped.
    pub fn add(&mut self, id: &str, tags: &[String], s: &SaliencyMap, y: &Mask) {
        self.add_result(id, tags, ImageMetrics::evaluate(s, y));
    }

    pub fn add_result(&mut self, id: &str, tags: &[String], result: Result<ImageMetrics>) {
        match result {
            Ok(m) => {
                self.images.insert(id.to_string(), (m, tags.to_vec()));
            }
            Err(e) => {
                self.skipped.insert(id.to_string(), e.to_string());
            }
        }
    }

    pub fn finish(&self) -> MetricReport {
        let all: Vec<&ImageMetrics> = self.images.values().map(|(m, _)| m).collect();
        let mut by_tag: BTreeMap<&str, Vec<&ImageMetrics>> = BTreeMap::new();
        for (m, tags) in self.images.values() {
            for t in tags {
                by_tag.entry(t.as_str()).or_default().push(m);
            }
        }
        MetricReport {
            per_image: self.images.iter().map(|(k, (m, _))| (k.clone(), *m)).collect(),
            aggregate: Aggregate::of(&all),
            groups: by_tag.into_iter().filter_map(|(t, v)| Aggregate::of(&v).map(|a| (t.to_string(), a))).collect(),
            skipped: self.skipped.iter().map(|(id, r)| Skipped { id: id.clone(), reason: r.clone() }).collect(),
        }
    }
}
