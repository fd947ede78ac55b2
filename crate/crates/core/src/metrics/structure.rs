//! Structure measure: `α·S_object + (1 − α)·S_region` with α = 0.5.

use crate::error::Result;

use super::{check_foreground, check_pair, Mask, SaliencyMap, EPS};

const ALPHA: f64 = 0.5;

pub fn s_measure(s: &SaliencyMap, y: &Mask) -> Result<f64> {
    check_pair(s, y)?;
    let fg = check_foreground(y)?;
    let n = s.data.len();
    if fg == n {
        return Ok(s.mean());
    }
    let score = ALPHA * object_score(s, y, fg) + (1.0 - ALPHA) * region_score(s, y);
    Ok(score.max(0.0))
}

/// Mean and sample standard deviation (`ddof = 1`, zero for one value).
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, libm::sqrt(ss / (n - 1) as f64))
}

fn object_term(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(s: &SaliencyMap, y: &Mask, fg: usize) -> f64 {
    let u = fg as f64 / s.data.len() as f64;
    let pairs = s.data.iter().zip(&y.data);
    let o_fg = object_term(pairs.clone().filter(|(_, &g)| g).map(|(&v, _)| v));
    let o_bg = object_term(pairs.filter(|(_, &g)| !g).map(|(&v, _)| 1.0 - v));
    u * o_fg + (1.0 - u) * o_bg
}

/// One-based centroid `(column, row)` of the foreground, each coordinate
/// rounded half to even.
fn centroid(y: &Mask) -> (usize, usize) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in y.data.iter().enumerate().filter(|(_, &g)| g) {
        sr += (i / y.w) as f64;
        sc += (i % y.w) as f64;
        n += 1;
    }
    let x = libm::rint(sc / n as f64) as usize;
    let r = libm::rint(sr / n as f64) as usize;
    (x + 1, r + 1)
}

fn region_score(s: &SaliencyMap, y: &Mask) -> f64 {
    let (x, r) = centroid(y);
    let (h, w) = (y.h, y.w);
    let area = (h * w) as f64;
    let blocks = [(0, r, 0, x), (0, r, x, w), (r, h, 0, x), (r, h, x, w)];
    let weights = [(x * r) as f64 / area, (r * (w - x)) as f64 / area, ((h - r) * x) as f64 / area];
    let weights = [weights[0], weights[1], weights[2], 1.0 - weights[0] - weights[1] - weights[2]];
    let mut score = 0.0;
    for (&(r0, r1, c0, c1), &wt) in blocks.iter().zip(&weights) {
        if r1 > r0 && c1 > c0 {
            score += wt * ssim(s, y, r0, r1, c0, c1);
        }
    }
    score
}

fn ssim(s: &SaliencyMap, y: &Mask, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    let n = (r1 - r0) * (c1 - c0);
    let cells = || (r0..r1).flat_map(move |r| (c0..c1).map(move |c| r * s.w + c));
    let gt = |i: usize| if y.data[i] { 1.0 } else { 0.0 };
    let mx = cells().map(|i| s.data[i]).sum::<f64>() / n as f64;
    let my = cells().map(gt).sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        let d = (n - 1) as f64;
        for i in cells() {
            let (a, b) = (s.data[i] - mx, gt(i) - my);
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
        sxx /= d;
        syy /= d;
        sxy /= d;
    }
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn self_similarity_is_one() {
        let y = Mask::new(3, 4, vec![false, true, true, false, false, true, true, false, false, false, false, false])
            .unwrap();
        let v = s_measure(&y.as_map(), &y).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn constant_prediction_scores_lower() {
        let y = Mask::new(3, 4, vec![false, true, true, false, false, true, true, false, false, false, false, false])
            .unwrap();
        let m = y.foreground() as f64 / 12.0;
        let flat = SaliencyMap::new(3, 4, vec![m; 12]).unwrap();
        assert!(s_measure(&flat, &y).unwrap() < s_measure(&y.as_map(), &y).unwrap());
    }

    #[test]
    fn centroid_rounds_half_to_even() {
        // Foreground columns 0 and 1 on row 0: mean column 0.5 rounds to 0.
        let y = Mask::new(2, 4, vec![true, true, false, false, false, false, false, false]).unwrap();
        assert_eq!(centroid(&y), (1, 1));
        // Columns 1 and 2: mean 1.5 rounds to 2.
        let y = Mask::new(2, 4, vec![false, true, true, false, false, false, false, false]).unwrap();
        assert_eq!(centroid(&y), (3, 1));
    }
}
