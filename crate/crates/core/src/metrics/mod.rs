//! Saliency evaluation: MAE, adaptive and threshold-swept F-measure,
//! weighted F-measure, S-measure and E-measure, plus dataset aggregation.
//!
//! Every measure takes a prediction in `[0, 1]` and a binary mask of the
//! same size. Measures other than MAE are undefined for a mask without
//! foreground and return [`Error::EmptyForeground`].

mod enhanced;
mod report;
mod structure;
mod weighted;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::pairwise_sum_by;

pub use enhanced::e_measure;
pub use report::{Aggregate, ImageMetrics, MetricAccumulator, MetricReport, Skipped};
pub use structure::s_measure;
pub use weighted::{nearest_foreground, weighted_f_measure, Nearest};

/// Precision weight of the F-measure.
pub const BETA2: f64 = 0.3;
/// Number of points on the precision/recall curve.
pub const CURVE_POINTS: usize = 20;
/// Upper clip of the adaptive threshold.
pub const ADAPTIVE_DELTA: f64 = 1e-8;
/// Machine epsilon used by the structure, alignment and weighted measures.
pub const EPS: f64 = f64::EPSILON;

/// Prediction values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::Input(format!("saliency map {h}x{w} with {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, data })
    }

    /// Linear rescale so the minimum maps to 0 and the maximum to 1; constant
    /// maps are returned unchanged.
    pub fn min_max_normalized(&self) -> Self {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return self.clone();
        }
        Self { data: self.data.iter().map(|v| (v - lo) / (hi - lo)).collect(), ..*self }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.w) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    fn mean(&self) -> f64 {
        pairwise_sum_by(self.data.len(), |i| self.data[i]) / self.data.len() as f64
    }
}

/// Binary ground truth, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::Input(format!("mask {h}x{w} with {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    /// Foreground where the gray value is ≥ 0.5.
    pub fn from_gray(h: usize, w: usize, gray: &[f64]) -> Result<Self> {
        Self::new(h, w, gray.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn as_map(&self) -> SaliencyMap {
        SaliencyMap { h: self.h, w: self.w, data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.w) {
            row.reverse();
        }
        Self { data, ..*self }
    }
}

fn check_pair(s: &SaliencyMap, y: &Mask) -> Result<()> {
    if (s.h, s.w) != (y.h, y.w) {
        return Err(Error::Input(format!("prediction {}x{} vs ground truth {}x{}", s.h, s.w, y.h, y.w)));
    }
    Ok(())
}

fn check_foreground(y: &Mask) -> Result<usize> {
    match y.foreground() {
        0 => Err(Error::EmptyForeground),
        n => Ok(n),
    }
}

/// Mean absolute error.
pub fn mae(s: &SaliencyMap, y: &Mask) -> Result<f64> {
    check_pair(s, y)?;
    let sum = pairwise_sum_by(s.data.len(), |i| (s.data[i] - if y.data[i] { 1.0 } else { 0.0 }).abs());
    Ok(sum / s.data.len() as f64)
}

/// `(1 + β²)·P·R / (β²·P + R)`, zero when both vanish.
pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

/// Twice the mean prediction, clipped below 1.
pub fn adaptive_threshold(s: &SaliencyMap) -> f64 {
    (2.0 * s.mean()).min(1.0 - ADAPTIVE_DELTA)
}

/// Precision and recall of `s ≥ t`. An empty prediction has precision 0.
pub fn precision_recall(s: &SaliencyMap, y: &Mask, t: f64) -> Result<(f64, f64)> {
    check_pair(s, y)?;
    let fg = check_foreground(y)?;
    let (mut tp, mut predicted) = (0usize, 0usize);
    for (&v, &g) in s.data.iter().zip(&y.data) {
        if v >= t {
            predicted += 1;
            tp += g as usize;
        }
    }
    let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    Ok((p, tp as f64 / fg as f64))
}

/// F-measure at the adaptive threshold.
pub fn adaptive_f_measure(s: &SaliencyMap, y: &Mask) -> Result<f64> {
    let (p, r) = precision_recall(s, y, adaptive_threshold(s))?;
    Ok(f_beta(p, r))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Threshold `k` of the curve grid: bin centres `(k + 0.5) / 20` over `[0, 1]`.
pub fn curve_threshold(k: usize) -> f64 {
    (k as f64 + 0.5) / CURVE_POINTS as f64
}

/// Precision, recall and F at the 20 grid thresholds.
pub fn pr_curve(s: &SaliencyMap, y: &Mask) -> Result<[CurvePoint; CURVE_POINTS]> {
    check_pair(s, y)?;
    let fg = check_foreground(y)?;
    // Histogram the predictions into threshold bins, then accumulate from the
    // top so each threshold counts every value at or above it.
    let mut hits = [(0usize, 0usize); CURVE_POINTS + 1];
    for (&v, &g) in s.data.iter().zip(&y.data) {
        let bin = (0..CURVE_POINTS).take_while(|&k| v >= curve_threshold(k)).count();
        hits[bin].0 += 1;
        hits[bin].1 += g as usize;
    }
    let mut out = [CurvePoint { threshold: 0.0, precision: 0.0, recall: 0.0, f: 0.0 }; CURVE_POINTS];
    let (mut predicted, mut tp) = (0usize, 0usize);
    for k in (0..CURVE_POINTS).rev() {
        predicted += hits[k + 1].0;
        tp += hits[k + 1].1;
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = tp as f64 / fg as f64;
        out[k] = CurvePoint { threshold: curve_threshold(k), precision, recall, f: f_beta(precision, recall) };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn half_foreground_prediction() {
        let y = Mask::new(2, 4, vec![true, true, true, true, false, false, false, false]).unwrap();
        let s = SaliencyMap::new(2, 4, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let f = adaptive_f_measure(&s, &y).unwrap();
        assert!((f - 0.8125).abs() < 1e-15);
    }

    #[test]
    fn flat_half_map_curve() {
        let y = Mask::new(1, 4, vec![true, true, false, false]).unwrap();
        let s = SaliencyMap::new(1, 4, vec![0.5; 4]).unwrap();
        let c = pr_curve(&s, &y).unwrap();
        for p in &c {
            if p.threshold <= 0.5 {
                assert_eq!((p.precision, p.recall), (0.5, 1.0));
            } else {
                assert_eq!((p.precision, p.recall, p.f), (0.0, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn perfect_prediction() {
        let y = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let s = y.as_map();
        assert_eq!(mae(&s, &y).unwrap(), 0.0);
        assert_eq!(adaptive_f_measure(&s, &y).unwrap(), 1.0);
        assert!(pr_curve(&s, &y).unwrap().iter().all(|p| p.recall == 1.0 && p.precision == 1.0));
        let empty = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert_eq!(adaptive_f_measure(&s, &empty), Err(Error::EmptyForeground));
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(SaliencyMap::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(SaliencyMap::new(1, 2, vec![0.0]).is_err());
        let s = SaliencyMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        let y = Mask::new(2, 1, vec![true, false]).unwrap();
        assert!(matches!(mae(&s, &y), Err(Error::Input(_))));
    }
}
