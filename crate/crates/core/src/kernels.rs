//! Raw numeric kernels: convolution via im2col + GEMM, max pooling with argmax
//! bookkeeping, and separable bilinear resampling. Autograd lives in
//! [`crate::autograd`]; these functions only move numbers.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Square convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn same(kernel: usize) -> Self {
        Self { kernel, stride: 1, pad: kernel / 2 }
    }

    pub const fn pointwise() -> Self {
        Self::same(1)
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y = w ⊛ x + b`, weights laid out `out × in × k × k`.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, g: ConvGeom) -> Tensor<T> {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(ws.c, xs.c, "conv2d: input channels");
    assert_eq!((ws.h, ws.w), (g.kernel, g.kernel), "conv2d: kernel size");
    let (oh, ow) = (g.out_len(xs.h), g.out_len(xs.w));
    let out_shape = Shape::new(xs.n, ws.n, oh, ow);
    let mut y = Tensor::zeros(out_shape);
    let kk = xs.c * g.kernel * g.kernel;
    let opix = oh * ow;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; kk * opix] };
    for n in 0..xs.n {
        let xi = x.item(n);
        let cols_ref: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, xs.c, xs.h, xs.w, g, &mut cols);
            &cols
        };
        let yi = y.item_mut(n);
        if let Some(b) = bias {
            for (co, plane) in yi.chunks_mut(opix).enumerate() {
                plane.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::ONE } else { T::ZERO };
        T::gemm(ws.n, kk, opix, T::ONE, weight.data(), (kk, 1), cols_ref, (opix, 1), beta, yi, (opix, 1));
    }
    y
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`. `dx` is skipped when the
/// input does not require a gradient.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let ws = weight.shape();
    let ys = dy.shape();
    let kk = xs.c * g.kernel * g.kernel;
    let opix = ys.h * ys.w;
    let mut dw = Tensor::zeros(ws);
    let mut db = vec![T::ZERO; ws.n];
    let mut dx = if need_dx { Some(Tensor::zeros(xs)) } else { None };
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::ZERO; kk * opix] };
    let mut dcols = if need_dx && !pointwise { vec![T::ZERO; kk * opix] } else { Vec::new() };
    for n in 0..xs.n {
        let dyi = dy.item(n);
        for (co, plane) in dyi.chunks(opix).enumerate() {
            let mut s = T::ZERO;
            for &v in plane {
                s += v;
            }
            db[co] += s;
        }
        let xi = x.item(n);
        let cols_ref: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, xs.c, xs.h, xs.w, g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(ws.n, opix, kk, T::ONE, dyi, (opix, 1), cols_ref, (1, opix), T::ONE, dw.data_mut(), (kk, 1));
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.item_mut(n);
            if pointwise {
                // dX = Wᵀ · dY
                T::gemm(kk, ws.n, opix, T::ONE, weight.data(), (1, kk), dyi, (opix, 1), T::ZERO, dxi, (opix, 1));
            } else {
                T::gemm(kk, ws.n, opix, T::ONE, weight.data(), (1, kk), dyi, (opix, 1), T::ZERO, &mut dcols, (opix, 1));
                col2im(&dcols, xs.c, xs.h, xs.w, g, dxi);
            }
        }
    }
    (dx, dw, db)
}

/// Result of a max-type pooling: values plus, for every output element, the
/// flat index into its input plane that produced it.
pub struct Pooled<T> {
    pub out: Tensor<T>,
    pub argmax: Vec<u32>,
}

fn pool_windows<T: Real>(
    x: &Tensor<T>,
    oh: usize,
    ow: usize,
    win: impl Fn(usize, usize) -> ((usize, usize), (usize, usize)),
) -> Pooled<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0u32; out_shape.len()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let ((y0, y1), (x0, x1)) = win(oy, ox);
                    let mut best = y0 * s.w + x0;
                    let mut bv = plane[best];
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let v = plane[yy * s.w + xx];
                            if v > bv {
                                bv = v;
                                best = yy * s.w + xx;
                            }
                        }
                    }
                    out.data_mut()[o] = bv;
                    argmax[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    Pooled { out, argmax }
}

/// Max pooling with a square window; padded positions never win.
pub fn max_pool<T: Real>(x: &Tensor<T>, g: ConvGeom) -> Pooled<T> {
    let s = x.shape();
    let (oh, ow) = (g.out_len(s.h), g.out_len(s.w));
    let clip = |o: usize, len: usize| {
        let start = (o * g.stride) as isize - g.pad as isize;
        let end = (start + g.kernel as isize).min(len as isize);
        (start.max(0) as usize, end as usize)
    };
    pool_windows(x, oh, ow, |oy, ox| (clip(oy, s.h), clip(ox, s.w)))
}

/// Bounds of cell `i` of an adaptive pooling grid with `n` cells over `len`
/// inputs: `[⌊i·len/n⌋, ⌈(i+1)·len/n⌉)`.
pub fn adaptive_window(i: usize, n: usize, len: usize) -> (usize, usize) {
    let start = (i * len) / n;
    let end = ((i + 1) * len).div_ceil(n);
    (start, end)
}

pub fn adaptive_max_pool<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Pooled<T> {
    let s = x.shape();
    assert!(oh >= 1 && ow >= 1 && oh <= s.h && ow <= s.w, "adaptive_max_pool: grid larger than input");
    pool_windows(x, oh, ow, |oy, ox| (adaptive_window(oy, oh, s.h), adaptive_window(ox, ow, s.w)))
}

/// Route output gradients back to the argmax positions.
pub fn scatter_argmax<T: Real>(dy: &Tensor<T>, argmax: &[u32], in_shape: Shape) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let per_plane = dy.shape().plane();
    let in_plane = in_shape.plane();
    for (p, chunk) in dy.data().chunks(per_plane).enumerate() {
        let base = p * in_plane;
        for (j, &g) in chunk.iter().enumerate() {
            dx.data_mut()[base + argmax[p * per_plane + j] as usize] += g;
        }
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::ONE / T::from_usize(s.plane());
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for (o, plane) in out.data_mut().iter_mut().zip(x.data().chunks(s.plane())) {
        let mut acc = 0.0f64;
        for &v in plane {
            acc += v.to_f64();
        }
        *o = T::from_f64(acc) * inv;
    }
    out
}

/// Interpolation taps along one axis for half-pixel-centred bilinear
/// resampling (output sample `o` reads source coordinate `(o+½)·in/out − ½`,
/// clamped at the borders).
#[derive(Clone, Debug)]
pub struct LinearTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Real> LinearTaps<T> {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(T::from_f64(if i1 == i0 { 0.0 } else { src - i0 as f64 }));
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resample of every plane to `oh × ow`. Equal sizes copy exactly and
/// constant planes stay bit-identical (taps are applied as `a + t·(b − a)`).
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    if (s.h, s.w) == (oh, ow) {
        return x.clone();
    }
    let ty = LinearTaps::<T>::new(s.h, oh);
    let tx = LinearTaps::<T>::new(s.w, ow);
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    let mut tmp = vec![T::ZERO; s.h * ow];
    for (src, dst) in x.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..s.h {
            let row = &src[y * s.w..(y + 1) * s.w];
            for ox in 0..ow {
                let a = row[tx.lo[ox]];
                let b = row[tx.hi[ox]];
                tmp[y * ow + ox] = a + tx.frac[ox] * (b - a);
            }
        }
        for oy in 0..oh {
            let (r0, r1, t) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let a = tmp[r0 * ow + ox];
                let b = tmp[r1 * ow + ox];
                dst[oy * ow + ox] = a + t * (b - a);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let ds = dy.shape();
    let (oh, ow) = (ds.h, ds.w);
    if (in_shape.h, in_shape.w) == (oh, ow) {
        return dy.clone();
    }
    let ty = LinearTaps::<T>::new(in_shape.h, oh);
    let tx = LinearTaps::<T>::new(in_shape.w, ow);
    let mut dx = Tensor::zeros(in_shape);
    let mut tmp = vec![T::ZERO; in_shape.h * ow];
    for (g, d) in dy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(in_shape.plane())) {
        tmp.fill(T::ZERO);
        for oy in 0..oh {
            let (r0, r1, t) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                tmp[r0 * ow + ox] += (T::ONE - t) * v;
                tmp[r1 * ow + ox] += t * v;
            }
        }
        for y in 0..in_shape.h {
            let row = &mut d[y * in_shape.w..(y + 1) * in_shape.w];
            for ox in 0..ow {
                let v = tmp[y * ow + ox];
                let t = tx.frac[ox];
                row[tx.lo[ox]] += (T::ONE - t) * v;
                row[tx.hi[ox]] += t * v;
            }
        }
    }
    dx
}

/// Nearest-neighbour resample using the same half-pixel centres.
pub fn resize_nearest<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let pick = |o: usize, out_len: usize, in_len: usize| -> usize {
        (((o as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
    };
    let ys: Vec<usize> = (0..oh).map(|o| pick(o, oh, s.h)).collect();
    let xs: Vec<usize> = (0..ow).map(|o| pick(o, ow, s.w)).collect();
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    for (src, dst) in x.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(oh * ow)) {
        for (oy, &iy) in ys.iter().enumerate() {
            for (ox, &ix) in xs.iter().enumerate() {
                dst[oy * ow + ox] = src[iy * s.w + ix];
            }
        }
    }
    out
}

/// Block-mean downsample by an integer factor (dimensions must divide).
pub fn area_downsample<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    assert!(factor >= 1 && s.h % factor == 0 && s.w % factor == 0, "area_downsample: {s} not divisible by {factor}");
    let (oh, ow) = (s.h / factor, s.w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    for (src, dst) in x.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for yy in oy * factor..(oy + 1) * factor {
                    for xx in ox * factor..(ox + 1) * factor {
                        acc += src[yy * s.w + xx].to_f64();
                    }
                }
                dst[oy * ow + ox] = T::from_f64(acc * inv);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    /// Direct 7-loop convolution in double precision.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeom) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (oh, ow) = (g.out_len(xs.h), g.out_len(xs.w));
        let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..xs.c {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        y.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut seed = 7;
        for g in [
            ConvGeom::same(3),
            ConvGeom::pointwise(),
            ConvGeom { kernel: 3, stride: 2, pad: 1 },
            ConvGeom { kernel: 7, stride: 2, pad: 3 },
        ] {
            let x = Tensor::from_fn(Shape::new(2, 3, 9, 8), |_| lcg(&mut seed));
            let w = Tensor::from_fn(Shape::new(4, 3, g.kernel, g.kernel), |_| lcg(&mut seed));
            let b: Vec<f64> = (0..4).map(|_| lcg(&mut seed)).collect();
            let y = conv2d(&x, &w, Some(&b), g);
            let r = conv_reference(&x, &w, &b, g);
            assert_eq!(y.shape(), r.shape());
            assert!(y.max_abs_diff(&r) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> is bilinear in (x, w): check both adjoints by finite sums.
        let mut seed = 11;
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = Tensor::from_fn(Shape::new(2, 3, 7, 6), |_| lcg(&mut seed));
        let w = Tensor::from_fn(Shape::new(5, 3, 3, 3), |_| lcg(&mut seed));
        let y = conv2d(&x, &w, None, g);
        let dy = Tensor::from_fn(y.shape(), |_| lcg(&mut seed));
        let (dx, dw, db) = conv2d_backward(&x, &w, &dy, g, true);
        let dx = dx.unwrap();
        let inner = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        // conv is linear in x: <dy, conv(x)> = <dx, x>, and likewise in w.
        assert!((inner(&dy, &y) - inner(&dx, &x)).abs() < 1e-10);
        assert!((inner(&dy, &y) - inner(&dw, &w)).abs() < 1e-10);
        let total: f64 = dy.data().iter().sum();
        assert!((db.iter().sum::<f64>() - total).abs() < 1e-10);
    }

    #[test]
    fn adaptive_windows_partition_with_overlap_rules() {
        assert_eq!(adaptive_window(0, 2, 4), (0, 2));
        assert_eq!(adaptive_window(1, 2, 4), (2, 4));
        // 5 cells over 22 inputs: windows overlap where the ratio is fractional
        assert_eq!(adaptive_window(0, 5, 22), (0, 5));
        assert_eq!(adaptive_window(1, 5, 22), (4, 9));
        assert_eq!(adaptive_window(4, 5, 22), (17, 22));
    }

    #[test]
    fn bilinear_identity_and_constants() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 2, 5, 3), |i| i as f32 * 0.37);
        assert_eq!(resize_bilinear(&x, 5, 3), x);
        let c = Tensor::<f32>::full(Shape::new(1, 1, 11, 11), 0.7);
        let up = resize_bilinear(&c, 44, 44);
        assert!(up.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut seed = 3;
        let x = Tensor::from_fn(Shape::new(1, 2, 5, 7), |_| lcg(&mut seed));
        for (oh, ow) in [(10, 14), (3, 4), (8, 5)] {
            let y = resize_bilinear(&x, oh, ow);
            let dy = Tensor::from_fn(y.shape(), |_| lcg(&mut seed));
            let dx = resize_bilinear_backward(&dy, x.shape());
            let lhs: f64 = dy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_padded_windows() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |i| -(i as f64));
        let p = max_pool(&x, ConvGeom { kernel: 3, stride: 2, pad: 1 });
        assert_eq!(p.out.shape(), Shape::new(1, 1, 2, 2));
        // padding must not contribute zeros to an all-negative map
        assert_eq!(p.out.data(), &[0.0, -1.0, -4.0, -5.0]);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |i| if (i % 4) < 2 { 1.0 } else { 0.0 });
        let d = area_downsample(&x, 2);
        assert_eq!(d.data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
