//! Training objective: branch, global and final cross-entropy terms plus an
//! edge-aware smoothness penalty on the final map.
//!
//! Every term is a mean over batch and pixels; multiply by the pixel count
//! `T` to recover the summed form.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::area_downsample;
use crate::model::SaliencyOutputs;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Edge sensitivity of the smoothness term.
    pub alpha: f64,
    /// Weight of the smoothness term.
    pub beta: f64,
    /// Prediction clamp inside the cross-entropy.
    pub eps: f64,
    /// `Ψ(s) = √(s² + psi_floor)`.
    pub psi_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 0.5, eps: 1e-7, psi_floor: 1e-6 }
    }
}

/// Term values (mean form). `l_d` is `None` when the network has no branch
/// heads, in which case it is absent from `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_d: Option<f64>,
    pub l_g: f64,
    pub l_f: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_d.unwrap_or(0.0), self.l_g, self.l_f, self.l_s, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_same<T: Real>(what: &str, s: &Var<T>, y: &Tensor<T>) -> Result<()> {
    if s.shape() != y.shape() {
        return Err(Error::Input(format!("{what}: prediction {} vs ground truth {}", s.shape(), y.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy with the prediction clamped to `[eps, 1 − eps]`.
pub fn bce<T: Real>(tape: &Tape<T>, s: &Var<T>, y: &Rc<Tensor<T>>, cfg: &LossConfig) -> Result<Var<T>> {
    check_same("cross-entropy", s, y)?;
    Ok(tape.bce(s, y.clone(), cfg.eps))
}

/// `bce(s1, y) + bce(s2, y)`.
pub fn branch_loss<T: Real>(
    tape: &Tape<T>,
    s1: &Var<T>,
    s2: &Var<T>,
    y: &Rc<Tensor<T>>,
    cfg: &LossConfig,
) -> Result<Var<T>> {
    let a = bce(tape, s1, y, cfg)?;
    let b = bce(tape, s2, y, cfg)?;
    Ok(tape.combine(&[(a, 1.0), (b, 1.0)]))
}

/// Ground truth at a coarser stride: block average, then ≥ 0.5.
pub fn downsample_mask<T: Real>(y: &Tensor<T>, factor: usize) -> Tensor<T> {
    area_downsample(y, factor).map(|v| if v.to_f64() >= 0.5 { T::ONE } else { T::ZERO })
}

/// Cross-entropy of the global score against the downsampled ground truth.
pub fn global_loss<T: Real>(tape: &Tape<T>, s_g: &Var<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Var<T>> {
    let (ys, gs) = (y.shape(), s_g.shape());
    let factor = ys.h / gs.h.max(1);
    if factor == 0 || ys.h != gs.h * factor || ys.w != gs.w * factor || ys.n != gs.n || ys.c != gs.c {
        return Err(Error::Input(format!("global score {gs} is not an integer downsampling of ground truth {ys}")));
    }
    let y_g = Rc::new(downsample_mask(y, factor));
    bce(tape, s_g, &y_g, cfg)
}

/// Mean over pixels of `Σ_{d∈{x,y}} Ψ(|∂_d s|·e^{−α|∂_d y|})`.
pub fn smoothness_loss<T: Real>(tape: &Tape<T>, s_f: &Var<T>, y: &Rc<Tensor<T>>, cfg: &LossConfig) -> Result<Var<T>> {
    check_same("smoothness", s_f, y)?;
    Ok(tape.smoothness(s_f, y.clone(), cfg.alpha, cfg.psi_floor))
}

/// `L = L_d + L_g + L_f + β·L_s` as a differentiable scalar.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    outputs: &SaliencyOutputs<T>,
    y: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var<T>, LossBreakdown)> {
    let y_rc = Rc::new(y.clone());
    let l_f = bce(tape, &outputs.sf, &y_rc, cfg)?;
    let l_g = global_loss(tape, &outputs.sg, y, cfg)?;
    let l_s = smoothness_loss(tape, &outputs.sf, &y_rc, cfg)?;
    let l_d = match &outputs.branches {
        Some([s1, s2]) => Some(branch_loss(tape, s1, s2, &y_rc, cfg)?),
        None => None,
    };
    let mut terms: Vec<(Var<T>, f64)> = Vec::with_capacity(4);
    if let Some(d) = &l_d {
        terms.push((d.clone(), 1.0));
    }
    terms.push((l_g.clone(), 1.0));
    terms.push((l_f.clone(), 1.0));
    terms.push((l_s.clone(), cfg.beta));
    let total = tape.combine(&terms);
    let breakdown = LossBreakdown {
        l_d: l_d.map(|v| v.item().to_f64()),
        l_g: l_g.item().to_f64(),
        l_f: l_f.item().to_f64(),
        l_s: l_s.item().to_f64(),
        total: total.item().to_f64(),
    };
    Ok((total, breakdown))
}
