//! One optimisation step of the full network, and the gradient queries used
//! to verify it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::Tape;
use crate::blocks::BN_MOMENTUM;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::SiamDecoder;
use crate::optim::{Sgd, SgdConfig};
use crate::params::{apply_norm_updates, Ctx, Mode, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Aligned training batch: `N×3×H×W` images and an `N×1×H×W` binary mask.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub rgb: Tensor<T>,
    pub thermal: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.rgb.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss of the network on a batch in the given mode, without side effects.
pub fn evaluate_loss<T: Real>(
    model: &SiamDecoder<T>,
    batch: &Batch<T>,
    mode: Mode,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &model.params, mode);
    let fwd = model.forward(&ctx, &batch.rgb, &batch.thermal)?;
    Ok(total_loss(&tape, &fwd.outputs, &batch.mask, loss)?.1)
}

/// Loss and the gradient of every weight that takes part in the forward
/// pass, plus the normalisation statistics the pass observed.
pub struct GradientReport<T: Real> {
    pub loss: LossBreakdown,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub norm_updates: Vec<crate::params::NormUpdate<T>>,
}

pub fn gradients<T: Real>(
    model: &SiamDecoder<T>,
    batch: &Batch<T>,
    mode: Mode,
    loss: &LossConfig,
) -> Result<GradientReport<T>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params, mode);
    let fwd = model.forward(&ctx, &batch.rgb, &batch.thermal)?;
    let (total, breakdown) = total_loss(&tape, &fwd.outputs, &batch.mask, loss)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss(format!("batch {:?}: {breakdown:?}", batch.ids)));
    }
    drop(fwd);
    let mut g = tape.backward(&total);
    Ok(GradientReport { loss: breakdown, grads: ctx.param_grads(&mut g), norm_updates: ctx.take_norm_updates() })
}

/// Network plus optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub model: SiamDecoder<T>,
    pub sgd: Sgd<T>,
    pub loss: LossConfig,
    /// Optimiser steps taken.
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: SiamDecoder<T>, sgd: SgdConfig, loss: LossConfig) -> Self {
        let sgd = Sgd::new(sgd, &model.params);
        Self { model, sgd, loss, step: 0 }
    }

    /// Forward, backward and update. A non-finite loss aborts before any
    /// state changes.
    pub fn train_step(&mut self, batch: &Batch<T>, lr: f64) -> Result<LossBreakdown> {
        self.train_step_scaled(batch, lr, 1.0)
    }

    /// As [`Trainer::train_step`], with the encoder at `encoder_scale · lr`.
    pub fn train_step_scaled(&mut self, batch: &Batch<T>, lr: f64, encoder_scale: f64) -> Result<LossBreakdown> {
        let report = gradients(&self.model, batch, Mode::Train, &self.loss)?;
        apply_norm_updates(&mut self.model.params, &report.norm_updates, BN_MOMENTUM);
        if encoder_scale == 1.0 {
            self.sgd.step(&mut self.model.params, report.grads, lr);
        } else {
            let params = &self.model.params;
            let (encoder, rest): (Vec<_>, Vec<_>) =
                report.grads.into_iter().partition(|(id, _)| params.entry(*id).name.starts_with("encoder."));
            self.sgd.step(&mut self.model.params, encoder, lr * encoder_scale);
            self.sgd.step(&mut self.model.params, rest, lr);
        }
        self.step += 1;
        Ok(report.loss)
    }
}
