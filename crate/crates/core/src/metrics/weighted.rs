//! Weighted F-measure: absolute errors are propagated from each background
//! pixel's nearest foreground pixel, smoothed by a 7×7 Gaussian (σ = 5),
//! and background errors are up-weighted with distance from the object.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;

use super::{check_foreground, check_pair, Mask, SaliencyMap, EPS};

const KERNEL: usize = 7;
const SIGMA: f64 = 5.0;

/// Nearest foreground pixel and squared distance, per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nearest {
    pub row: usize,
    pub col: usize,
    pub d2: u64,
}

/// Exact Euclidean nearest-foreground search: a per-column 1-D pass, then
/// the lower envelope of parabolas along each row. Among equidistant
/// foreground pixels the one with the smallest column, then smallest row,
/// wins. Every entry is `None` when the mask has no foreground.
pub fn nearest_foreground(y: &Mask) -> Vec<Option<Nearest>> {
    let (h, w) = (y.h, y.w);
    // Column pass: nearest foreground row within the column, ties upward.
    let mut col_row: Vec<Option<usize>> = vec![None; h * w];
    for c in 0..w {
        let mut above = None;
        for r in 0..h {
            if y.data[r * w + c] {
                above = Some(r);
            }
            col_row[r * w + c] = above;
        }
        let mut below = None;
        for r in (0..h).rev() {
            if y.data[r * w + c] {
                below = Some(r);
            }
            let best = match (col_row[r * w + c], below) {
                (Some(a), Some(b)) => Some(if r - a <= b - r { a } else { b }),
                (a, b) => a.or(b),
            };
            col_row[r * w + c] = best;
        }
    }

    let mut out = vec![None; h * w];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    // Envelope boundaries as exact fractions `num / den` with `den > 0`.
    let mut bounds: Vec<(i64, i64)> = Vec::with_capacity(w + 1);
    for r in 0..h {
        let f = |c: usize| -> Option<i64> { col_row[r * w + c].map(|rr| (rr as i64 - r as i64).pow(2)) };
        sites.clear();
        bounds.clear();
        for q in 0..w {
            let Some(fq) = f(q) else { continue };
            while let Some(&v) = sites.last() {
                let fv = f(v).expect("site has a value");
                let (qi, vi) = (q as i64, v as i64);
                let s = ((fq + qi * qi) - (fv + vi * vi), 2 * (qi - vi));
                // Drop `v` when the new parabola undercuts it before `v` starts.
                match bounds.last() {
                    Some(&z) if s.0 * z.1 <= z.0 * s.1 => {
                        sites.pop();
                        bounds.pop();
                    }
                    _ => {
                        bounds.push(s);
                        break;
                    }
                }
            }
            sites.push(q);
        }
        if sites.is_empty() {
            continue;
        }
        // bounds[k] separates sites[k] and sites[k + 1].
        let mut k = 0;
        for x in 0..w {
            while k < bounds.len() && bounds[k].0 < x as i64 * bounds[k].1 {
                k += 1;
            }
            let c = sites[k];
            let rr = col_row[r * w + c].expect("site has a value");
            let d2 = (rr as i64 - r as i64).pow(2) + (c as i64 - x as i64).pow(2);
            out[r * w + x] = Some(Nearest { row: rr, col: c, d2: d2 as u64 });
        }
    }
    out
}

/// Normalised 7×7 Gaussian with σ = 5.
fn gaussian_kernel() -> [[f64; KERNEL]; KERNEL] {
    let m = (KERNEL / 2) as f64;
    let mut k = [[0.0; KERNEL]; KERNEL];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - m, j as f64 - m);
            *v = libm::exp(-(x * x + y * y) / (2.0 * SIGMA * SIGMA));
            sum += *v;
        }
    }
    for v in k.iter_mut().flatten() {
        *v /= sum;
    }
    k
}

pub fn weighted_f_measure(s: &SaliencyMap, y: &Mask) -> Result<f64> {
    check_pair(s, y)?;
    check_foreground(y)?;
    let (h, w) = (y.h, y.w);
    let gt = |i: usize| if y.data[i] { 1.0 } else { 0.0 };
    let err: Vec<f64> = (0..h * w).map(|i| (s.data[i] - gt(i)).abs()).collect();
    let nearest = nearest_foreground(y);
    let propagated: Vec<f64> = (0..h * w)
        .map(|i| {
            let n = nearest[i].expect("mask has foreground");
            err[n.row * w + n.col]
        })
        .collect();

    let kernel = gaussian_kernel();
    let half = (KERNEL / 2) as isize;
    let mut ew = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let e = err[i];
            let weighted = if y.data[i] {
                let mut ea = 0.0;
                for (ki, krow) in kernel.iter().enumerate() {
                    let rr = r as isize + ki as isize - half;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for (kj, &kv) in krow.iter().enumerate() {
                        let cc = c as isize + kj as isize - half;
                        if cc >= 0 && cc < w as isize {
                            ea += kv * propagated[rr as usize * w + cc as usize];
                        }
                    }
                }
                if ea < e {
                    ea
                } else {
                    e
                }
            } else {
                let d = libm::sqrt(nearest[i].expect("mask has foreground").d2 as f64);
                e * (2.0 - libm::exp(libm::log(0.5) / 5.0 * d))
            };
            ew[i] = weighted;
        }
    }
    let (mut fg_n, mut fg_err, mut bg_err) = (0usize, 0.0, 0.0);
    for (i, &v) in ew.iter().enumerate() {
        if y.data[i] {
            fg_n += 1;
            fg_err += v;
        } else {
            bg_err += v;
        }
    }
    let tp = fg_n as f64 - fg_err;
    let recall = 1.0 - fg_err / fg_n as f64;
    let precision = tp / (tp + bg_err + EPS);
    Ok(2.0 * recall * precision / (recall + precision + EPS))
}
