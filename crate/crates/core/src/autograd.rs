//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation whose inputs require a gradient. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. An inference tape
//! records nothing: intermediate values are dropped as soon as the last
//! [`Var`] holding them goes out of scope.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::kernels::{self, ConvGeom};
use crate::real::{pairwise_sum_by, Real};
use crate::tensor::{Shape, Tensor};

/// A value flowing through the tape. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Var<T: Real> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    #[inline]
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    /// Tape node id; `None` for constants.
    #[inline]
    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }

    /// Scalar value of a 1×1×1×1 tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.value.shape().len(), 1, "item() on non-scalar");
        self.value.data()[0]
    }

    fn input(&self) -> Input {
        Input { id: self.id, shape: self.shape() }
    }
}

/// Input reference for ops whose backward pass needs only the shape.
#[derive(Clone, Copy, Debug)]
struct Input {
    id: Option<usize>,
    shape: Shape,
}

/// Statistics used by a batch-normalisation node.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    /// Unbiased per-channel variance of the batch (for running averages);
    /// empty when running statistics were used.
    pub batch_var: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Conv { x: Var<T>, w: Var<T>, b: Option<Input>, geom: ConvGeom },
    BatchNorm { x: Var<T>, gamma: Var<T>, beta: Input, mean: Vec<T>, invstd: Vec<T>, batch_stats: bool },
    Relu { x: Input, out: Rc<Tensor<T>> },
    Sigmoid { x: Input, out: Rc<Tensor<T>> },
    Add { a: Input, b: Input },
    ChannelScale { x: Var<T>, s: Var<T> },
    Concat { parts: Vec<Input> },
    GatherMax { x: Input, argmax: Vec<u32> },
    GlobalAvg { x: Input },
    Resize { x: Input },
    Bce { s: Var<T>, target: Rc<Tensor<T>>, eps: f64 },
    Smoothness { s: Var<T>, target: Rc<Tensor<T>>, alpha: f64, floor: f64 },
    Combine { terms: Vec<(Input, f64)> },
}

/// Gradients produced by [`Tape::backward`], retained for leaves only.
pub struct Gradients<T> {
    by_id: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|i| self.by_id.get(i)).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.id.and_then(|i| self.by_id.get_mut(i)).and_then(|g| g.take())
    }
}

pub struct Tape<T: Real> {
    ops: RefCell<Vec<Op<T>>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: Option<usize>, g: Tensor<T>) {
    if let Some(id) = id {
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape for training.
    pub fn new() -> Self {
        Self { ops: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that records nothing; every result is a constant.
    pub fn inference() -> Self {
        Self { ops: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { id: None, value: Rc::new(t) }
    }

    /// A differentiable leaf (a parameter). On an inference tape this is a
    /// constant sharing the parameter storage.
    pub fn leaf(&self, t: Rc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { id: None, value: t };
        }
        let mut ops = self.ops.borrow_mut();
        ops.push(Op::Leaf);
        Var { id: Some(ops.len() - 1), value: t }
    }

    fn push(&self, value: Tensor<T>, needs: bool, op: impl FnOnce() -> Op<T>) -> Var<T> {
        self.push_rc(Rc::new(value), needs, op)
    }

    fn push_rc(&self, value: Rc<Tensor<T>>, needs: bool, op: impl FnOnce() -> Op<T>) -> Var<T> {
        if !(self.recording && needs) {
            return Var { id: None, value };
        }
        let mut ops = self.ops.borrow_mut();
        ops.push(op());
        Var { id: Some(ops.len() - 1), value }
    }

    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, geom: ConvGeom) -> Var<T> {
        let y = kernels::conv2d(x.value(), w.value(), b.map(|b| b.value().data()), geom);
        let needs = x.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.push(y, needs, || Op::Conv { x: x.clone(), w: w.clone(), b: b.map(Var::input), geom })
    }

    /// Per-channel normalisation `γ·(x − μ)·invstd + β` with caller-supplied or
    /// batch statistics.
    pub fn batch_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: &NormStats<T>,
        batch_stats: bool,
    ) -> Var<T> {
        let s = x.shape();
        let mut y = Tensor::zeros(s);
        let g = gamma.value().data();
        let b = beta.value().data();
        for n in 0..s.n {
            for c in 0..s.c {
                let scale = g[c] * stats.invstd[c];
                let shift = b[c] - stats.mean[c] * scale;
                let src = x.value().plane(n, c);
                for (o, &v) in y.plane_mut(n, c).iter_mut().zip(src) {
                    *o = v * scale + shift;
                }
            }
        }
        let needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.push(y, needs, || Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.input(),
            mean: stats.mean.clone(),
            invstd: stats.invstd.clone(),
            batch_stats,
        })
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        let out = Rc::new(x.value().map(|v| if v > T::ZERO { v } else { T::ZERO }));
        let keep = out.clone();
        self.push_rc(out, x.requires_grad(), || Op::Relu { x: x.input(), out: keep })
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = Rc::new(x.value().map(sigmoid));
        let keep = out.clone();
        self.push_rc(out, x.requires_grad(), || Op::Sigmoid { x: x.input(), out: keep })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let mut y = a.value().clone();
        y.add_assign(b.value());
        self.push(y, a.requires_grad() || b.requires_grad(), || Op::Add { a: a.input(), b: b.input() })
    }

    /// `x[n,c,·,·] · s[n,c]` with `s` of shape `N×C×1×1`.
    pub fn scale_channels(&self, x: &Var<T>, s: &Var<T>) -> Var<T> {
        let xs = x.shape();
        assert_eq!(s.shape(), Shape::new(xs.n, xs.c, 1, 1), "scale_channels: weights shape");
        let mut y = x.value().clone();
        for (k, plane) in y.data_mut().chunks_mut(xs.plane()).enumerate() {
            let w = s.value().data()[k];
            for v in plane {
                *v *= w;
            }
        }
        self.push(y, x.requires_grad() || s.requires_grad(), || Op::ChannelScale { x: x.clone(), s: s.clone() })
    }

    /// Channel-wise concatenation.
    pub fn concat(&self, parts: &[Var<T>]) -> Var<T> {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = parts[0].shape();
        let c_total: usize = parts.iter().map(|p| p.shape().c).sum();
        for p in parts {
            let s = p.shape();
            assert_eq!((s.n, s.h, s.w), (first.n, first.h, first.w), "concat: spatial mismatch");
        }
        let out_shape = first.with_channels(c_total);
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.value().item(n));
            }
        }
        let y = Tensor::from_vec(out_shape, data).expect("concat length");
        let needs = parts.iter().any(Var::requires_grad);
        self.push(y, needs, || Op::Concat { parts: parts.iter().map(Var::input).collect() })
    }

    pub fn max_pool(&self, x: &Var<T>, geom: ConvGeom) -> Var<T> {
        let p = kernels::max_pool(x.value(), geom);
        self.push(p.out, x.requires_grad(), || Op::GatherMax { x: x.input(), argmax: p.argmax })
    }

    pub fn adaptive_max_pool(&self, x: &Var<T>, oh: usize, ow: usize) -> Var<T> {
        let p = kernels::adaptive_max_pool(x.value(), oh, ow);
        self.push(p.out, x.requires_grad(), || Op::GatherMax { x: x.input(), argmax: p.argmax })
    }

    pub fn global_max_pool(&self, x: &Var<T>) -> Var<T> {
        self.adaptive_max_pool(x, 1, 1)
    }

    pub fn global_avg_pool(&self, x: &Var<T>) -> Var<T> {
        let y = kernels::global_avg_pool(x.value());
        self.push(y, x.requires_grad(), || Op::GlobalAvg { x: x.input() })
    }

    /// Bilinear resample (half-pixel centres).
    pub fn resize(&self, x: &Var<T>, oh: usize, ow: usize) -> Var<T> {
        let s = x.shape();
        if (s.h, s.w) == (oh, ow) {
            return x.clone();
        }
        let y = kernels::resize_bilinear(x.value(), oh, ow);
        self.push(y, x.requires_grad(), || Op::Resize { x: x.input() })
    }

    /// Mean binary cross-entropy of `s` (clamped to `[eps, 1 − eps]`) against
    /// a constant target, over every element.
    pub fn bce(&self, s: &Var<T>, target: Rc<Tensor<T>>, eps: f64) -> Var<T> {
        assert_eq!(s.shape(), target.shape(), "bce: shape mismatch");
        let sv = s.value().data();
        let yv = target.data();
        let total = pairwise_sum_by(sv.len(), |i| {
            let p = sv[i].to_f64().clamp(eps, 1.0 - eps);
            let y = yv[i].to_f64();
            -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
        });
        let mean = total / sv.len() as f64;
        self.push(Tensor::scalar(T::from_f64(mean)), s.requires_grad(), || Op::Bce { s: s.clone(), target, eps })
    }

    /// Mean edge-aware smoothness penalty of `s` guided by `target`:
    /// per pixel, `Σ_d √((|∂_d s|·e^{−α|∂_d y|})² + floor)` over both axes,
    /// with forward differences that are zero at the trailing border.
    pub fn smoothness(&self, s: &Var<T>, target: Rc<Tensor<T>>, alpha: f64, floor: f64) -> Var<T> {
        assert_eq!(s.shape(), target.shape(), "smoothness: shape mismatch");
        let sh = s.shape();
        let sv = s.value().data();
        let yv = target.data();
        let (h, w) = (sh.h, sh.w);
        let total = pairwise_sum_by(sv.len(), |i| {
            let (yy, xx) = ((i / w) % h, i % w);
            let mut acc = 0.0;
            for (step, has_next) in [(1usize, xx + 1 < w), (w, yy + 1 < h)] {
                let (ds, dy) = if has_next {
                    (sv[i + step].to_f64() - sv[i].to_f64(), yv[i + step].to_f64() - yv[i].to_f64())
                } else {
                    (0.0, 0.0)
                };
                let m = ds.abs() * libm::exp(-alpha * dy.abs());
                acc += libm::sqrt(m * m + floor);
            }
            acc
        });
        let mean = total / sv.len() as f64;
        self.push(Tensor::scalar(T::from_f64(mean)), s.requires_grad(), || Op::Smoothness {
            s: s.clone(),
            target,
            alpha,
            floor,
        })
    }

    /// `Σ coef_k · term_k` over scalar vars.
    pub fn combine(&self, terms: &[(Var<T>, f64)]) -> Var<T> {
        let mut acc = 0.0;
        for (v, c) in terms {
            assert_eq!(v.shape().len(), 1, "combine: terms must be scalars");
            acc += c * v.item().to_f64();
        }
        let needs = terms.iter().any(|(v, _)| v.requires_grad());
        self.push(Tensor::scalar(T::from_f64(acc)), needs, || Op::Combine {
            terms: terms.iter().map(|(v, c)| (v.input(), *c)).collect(),
        })
    }

    /// Reverse sweep from a scalar root. Gradients are kept for leaves only.
    pub fn backward(&self, root: &Var<T>) -> Gradients<T> {
        let ops = self.ops.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..ops.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Gradients { by_id: grads };
        };
        assert_eq!(root.shape().len(), 1, "backward: root must be a scalar");
        grads[root_id] = Some(Tensor::full(root.shape(), T::ONE));
        for id in (0..=root_id).rev() {
            let op = &ops[id];
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(op, g, &mut grads);
        }
        Gradients { by_id: grads }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

fn backprop<T: Real>(op: &Op<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    match op {
        Op::Leaf => {}
        Op::Conv { x, w, b, geom } => {
            let (dx, dw, db) = kernels::conv2d_backward(x.value(), w.value(), &g, *geom, x.requires_grad());
            if let Some(dx) = dx {
                accumulate(grads, x.id, dx);
            }
            accumulate(grads, w.id, dw);
            if let Some(b) = b {
                let dbt = Tensor::from_vec(b.shape, db).expect("bias grad shape");
                accumulate(grads, b.id, dbt);
            }
        }
        Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats } => {
            let s = x.shape();
            let m = (s.n * s.plane()) as f64;
            let gm = gamma.value().data();
            let mut dgamma = vec![0.0f64; s.c];
            let mut dbeta = vec![0.0f64; s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let xp = x.value().plane(n, c);
                    let gp = g.plane(n, c);
                    let (mu, is) = (mean[c].to_f64(), invstd[c].to_f64());
                    let mut sg = 0.0;
                    let mut sgx = 0.0;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        let gv = gv.to_f64();
                        sg += gv;
                        sgx += gv * (xv.to_f64() - mu) * is;
                    }
                    dbeta[c] += sg;
                    dgamma[c] += sgx;
                }
            }
            if x.requires_grad() {
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let (mu, is, gc) = (mean[c].to_f64(), invstd[c].to_f64(), gm[c].to_f64());
                        let xp = x.value().plane(n, c);
                        let gp = g.plane(n, c);
                        let out = dx.plane_mut(n, c);
                        if *batch_stats {
                            let k = gc * is / m;
                            for ((o, &gv), &xv) in out.iter_mut().zip(gp).zip(xp) {
                                let xhat = (xv.to_f64() - mu) * is;
                                *o = T::from_f64(k * (m * gv.to_f64() - dbeta[c] - xhat * dgamma[c]));
                            }
                        } else {
                            let k = gc * is;
                            for (o, &gv) in out.iter_mut().zip(gp) {
                                *o = T::from_f64(k * gv.to_f64());
                            }
                        }
                    }
                }
                accumulate(grads, x.id, dx);
            }
            let cshape = gamma.shape();
            accumulate(
                grads,
                gamma.id,
                Tensor::from_vec(cshape, dgamma.iter().map(|&v| T::from_f64(v)).collect()).unwrap(),
            );
            accumulate(
                grads,
                beta.id,
                Tensor::from_vec(beta.shape, dbeta.iter().map(|&v| T::from_f64(v)).collect()).unwrap(),
            );
        }
        Op::Relu { x, out } => {
            let mut dx = g;
            for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
                if o <= T::ZERO {
                    *d = T::ZERO;
                }
            }
            accumulate(grads, x.id, dx);
        }
        Op::Sigmoid { x, out } => {
            let mut dx = g;
            for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
                *d *= o * (T::ONE - o);
            }
            accumulate(grads, x.id, dx);
        }
        Op::Add { a, b } => {
            accumulate(grads, a.id, g.clone());
            accumulate(grads, b.id, g);
        }
        Op::ChannelScale { x, s } => {
            let xs = x.shape();
            let plane = xs.plane();
            if s.requires_grad() {
                let mut ds = Tensor::zeros(s.shape());
                for (k, (gp, xp)) in g.data().chunks(plane).zip(x.value().data().chunks(plane)).enumerate() {
                    let mut acc = 0.0f64;
                    for (&a, &b) in gp.iter().zip(xp) {
                        acc += a.to_f64() * b.to_f64();
                    }
                    ds.data_mut()[k] = T::from_f64(acc);
                }
                accumulate(grads, s.id, ds);
            }
            if x.requires_grad() {
                let mut dx = g;
                for (k, dp) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let w = s.value().data()[k];
                    for v in dp {
                        *v *= w;
                    }
                }
                accumulate(grads, x.id, dx);
            }
        }
        Op::Concat { parts } => {
            let gs = g.shape();
            let mut offset = 0;
            for p in parts {
                let c = p.shape.c;
                if p.id.is_some() {
                    let mut data = Vec::with_capacity(p.shape.len());
                    for n in 0..gs.n {
                        let item = g.item(n);
                        data.extend_from_slice(&item[offset * gs.plane()..(offset + c) * gs.plane()]);
                    }
                    accumulate(grads, p.id, Tensor::from_vec(p.shape, data).unwrap());
                }
                offset += c;
            }
        }
        Op::GatherMax { x, argmax } => {
            accumulate(grads, x.id, kernels::scatter_argmax(&g, argmax, x.shape));
        }
        Op::GlobalAvg { x } => {
            let inv = T::ONE / T::from_usize(x.shape.plane());
            let mut dx = Tensor::zeros(x.shape);
            for (k, dp) in dx.data_mut().chunks_mut(x.shape.plane()).enumerate() {
                dp.fill(g.data()[k] * inv);
            }
            accumulate(grads, x.id, dx);
        }
        Op::Resize { x } => {
            accumulate(grads, x.id, kernels::resize_bilinear_backward(&g, x.shape));
        }
        Op::Bce { s, target, eps } => {
            let scale = g.data()[0].to_f64() / s.shape().len() as f64;
            let ds = Tensor::from_fn(s.shape(), |i| {
                let p = s.value().data()[i].to_f64();
                if p < *eps || p > 1.0 - eps {
                    return T::ZERO;
                }
                let y = target.data()[i].to_f64();
                T::from_f64(scale * (-y / p + (1.0 - y) / (1.0 - p)))
            });
            accumulate(grads, s.id, ds);
        }
        Op::Smoothness { s, target, alpha, floor } => {
            let sh = s.shape();
            let (h, w) = (sh.h, sh.w);
            let scale = g.data()[0].to_f64() / sh.len() as f64;
            let sv = s.value().data();
            let yv = target.data();
            let mut ds = vec![0.0f64; sv.len()];
            for i in 0..sv.len() {
                let (yy, xx) = ((i / w) % h, i % w);
                for (step, has_next) in [(1usize, xx + 1 < w), (w, yy + 1 < h)] {
                    if !has_next {
                        continue;
                    }
                    let d = sv[i + step].to_f64() - sv[i].to_f64();
                    let wgt = libm::exp(-alpha * (yv[i + step].to_f64() - yv[i].to_f64()).abs());
                    let m = d * wgt;
                    let psi = libm::sqrt(m * m + floor);
                    let dd = scale * d * wgt * wgt / psi;
                    ds[i + step] += dd;
                    ds[i] -= dd;
                }
            }
            accumulate(grads, s.id, Tensor::from_vec(sh, ds.into_iter().map(T::from_f64).collect()).unwrap());
        }
        Op::Combine { terms } => {
            let gv = g.data()[0].to_f64();
            for (t, c) in terms {
                accumulate(grads, t.id, Tensor::scalar(T::from_f64(gv * c)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: Shape, seed: &mut u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central-difference check of d(f)/d(leaf) for a scalar-valued graph.
    fn check<F>(leaf: Tensor<f64>, f: F)
    where
        F: Fn(&Tape<f64>, &Var<f64>) -> Var<f64>,
    {
        let tape = Tape::new();
        let x = tape.leaf(Rc::new(leaf.clone()));
        let y = f(&tape, &x);
        let grads = tape.backward(&y);
        let analytic = grads.get(&x).expect("leaf gradient").clone();
        let h = 1e-6;
        for i in 0..leaf.data().len() {
            let eval = |delta: f64| {
                let mut t = leaf.clone();
                t.data_mut()[i] += delta;
                let tape = Tape::inference();
                let v = tape.constant(t);
                f(&tape, &v).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "coord {i}: analytic {a} numeric {numeric}");
        }
    }

    /// Reduce any tensor to a scalar through a fixed random projection.
    fn project(tape: &Tape<f64>, v: &Var<f64>, seed: u64) -> Var<f64> {
        let mut s = seed;
        let proj = rand_tensor(v.shape(), &mut s);
        let w = tape.constant(proj.map(|p| p * 0.5 + 0.5));
        let prod = tape.scale_channels(&tape.concat(core::slice::from_ref(&v)), &tape.global_avg_pool(&w));
        let pooled = tape.global_avg_pool(&prod);
        // pooled is N×C×1×1; fold channels with a 1×1 conv of ones
        let s = pooled.shape();
        let ones = tape.constant(Tensor::full(Shape::new(1, s.c, 1, 1), 1.0));
        let summed = tape.conv2d(&pooled, &ones, None, ConvGeom::pointwise());
        let target = Rc::new(Tensor::full(summed.shape(), 0.3));
        let sg = tape.sigmoid(&summed);
        tape.bce(&sg, target, 1e-7)
    }

    #[test]
    fn conv_bn_relu_chain_gradients() {
        let mut seed = 1;
        let x0 = rand_tensor(Shape::new(2, 3, 5, 5), &mut seed);
        let w = rand_tensor(Shape::new(4, 3, 3, 3), &mut seed);
        check(x0, |tape, x| {
            let w = tape.constant(w.clone());
            let y = tape.conv2d(x, &w, None, ConvGeom::same(3));
            let s = y.shape();
            let gamma = tape.constant(Tensor::full(Shape::new(1, s.c, 1, 1), 1.3));
            let beta = tape.constant(Tensor::full(Shape::new(1, s.c, 1, 1), 0.1));
            let bn = batch_norm_train(tape, &y, &gamma, &beta);
            let r = tape.relu(&bn);
            project(tape, &r, 9)
        });
    }

    // Train-mode normalisation where the statistics depend on the input.
    fn batch_moments(t: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let s = t.shape();
        let m = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                mean[c] += t.plane(n, c).iter().sum::<f64>() / m;
            }
        }
        for n in 0..s.n {
            for c in 0..s.c {
                var[c] += t.plane(n, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / m;
            }
        }
        (mean, var)
    }

    fn batch_norm_train(tape: &Tape<f64>, x: &Var<f64>, gamma: &Var<f64>, beta: &Var<f64>) -> Var<f64> {
        let (mean, var) = batch_moments(x.value());
        let stats =
            NormStats { invstd: var.iter().map(|v| 1.0 / (v + 1e-5).sqrt()).collect(), mean, batch_var: vec![] };
        tape.batch_norm(x, gamma, beta, &stats, true)
    }

    #[test]
    fn pooling_resize_and_attention_gradients() {
        let mut seed = 5;
        let x0 = rand_tensor(Shape::new(1, 2, 6, 6), &mut seed);
        check(x0, |tape, x| {
            let p = tape.max_pool(x, ConvGeom { kernel: 2, stride: 2, pad: 0 });
            let a = tape.adaptive_max_pool(x, 4, 4);
            let up = tape.resize(&p, 4, 4);
            let sum = tape.add(&up, &a);
            let att = tape.sigmoid(&tape.add(&tape.global_avg_pool(&sum), &tape.global_max_pool(&sum)));
            let scaled = tape.scale_channels(&sum, &att);
            let big = tape.resize(&scaled, 9, 7);
            project(tape, &big, 3)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut seed = 8;
        let x0 = rand_tensor(Shape::new(2, 1, 5, 6), &mut seed);
        let y = Rc::new(rand_tensor(Shape::new(2, 1, 5, 6), &mut seed).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        check(x0, |tape, x| {
            let s = tape.sigmoid(x);
            let b = tape.bce(&s, y.clone(), 1e-7);
            let sm = tape.smoothness(&s, y.clone(), 10.0, 1e-6);
            tape.combine(&[(b, 1.0), (sm, 0.5)])
        });
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Rc::new(Tensor::full(Shape::new(1, 1, 2, 2), 1.0)));
        let y = tape.relu(&tape.add(&x, &x));
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }
}
