//! Enhanced alignment measure of the adaptively binarised prediction.
//!
//! With a binary prediction and a binary mask every pixel falls into one of
//! four (prediction, truth) classes, and the enhanced alignment value depends
//! only on the class, so the per-pixel mean is computed from class counts.

use crate::error::Result;

use super::{adaptive_threshold, check_foreground, check_pair, Mask, SaliencyMap, EPS};

pub fn e_measure(s: &SaliencyMap, y: &Mask) -> Result<f64> {
    check_pair(s, y)?;
    let fg = check_foreground(y)?;
    let t = adaptive_threshold(s);
    let n = s.data.len();
    let mut counts = [[0usize; 2]; 2];
    for (&v, &g) in s.data.iter().zip(&y.data) {
        counts[(v >= t) as usize][g as usize] += 1;
    }
    let predicted = counts[1][0] + counts[1][1];
    if fg == n {
        return Ok(predicted as f64 / n as f64);
    }
    let (mean_p, mean_g) = (predicted as f64 / n as f64, fg as f64 / n as f64);
    let mut sum = 0.0;
    for (b, row) in counts.iter().enumerate() {
        for (g, &count) in row.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let (dp, dg) = (b as f64 - mean_p, g as f64 - mean_g);
            let align = 2.0 * dg * dp / (dg * dg + dp * dp + EPS);
            sum += count as f64 * (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    Ok(sum / n as f64)
}
