//! Building blocks shared by every network module: the convolution unit
//! (convolution → batch normalisation → ReLU), channel attention, and
//! bilinear resampling.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{NormStats, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{Builder, Ctx, NormUpdate, ParamId, ParamKind};
use crate::real::Real;
use crate::tensor::Shape;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Hidden-width divisor of the attention bottleneck.
pub const CA_REDUCTION: usize = 16;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * geom.kernel * geom.kernel;
        // He initialisation for ReLU networks.
        let std = libm::sqrt(2.0 / fan_in as f64);
        let weight = b.normal("weight", Shape::new(out_channels, in_channels, geom.kernel, geom.kernel), std);
        let bias = bias.then(|| b.constant("bias", ParamKind::Weight, Shape::new(1, out_channels, 1, 1), 0.0));
        Self { weight, bias, geom, in_channels, out_channels }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("convolution", x, self.in_channels)?;
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        Ok(ctx.tape.conv2d(x, &w, b.as_ref(), self.geom))
    }
}

fn check_channels<T: Real>(what: &str, x: &Var<T>, expected: usize) -> Result<()> {
    if x.shape().c != expected {
        return Err(Error::Config(format!("{what} expects {expected} input channels, got {}", x.shape().c)));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(b: &mut Builder<T>, channels: usize) -> Self {
        let cs = Shape::new(1, channels, 1, 1);
        Self {
            gamma: b.constant("weight", ParamKind::Weight, cs, 1.0),
            beta: b.constant("bias", ParamKind::Weight, cs, 0.0),
            running_mean: b.constant("running_mean", ParamKind::Buffer, cs, 0.0),
            running_var: b.constant("running_var", ParamKind::Buffer, cs, 1.0),
            channels,
        }
    }

    /// Training mode normalises with batch statistics and records them for the
    /// running averages. A batch with a single value per channel (a pooled
    /// 1×1 map at batch size one) has no usable variance, so it falls back to
    /// the running statistics exactly as evaluation mode does.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("batch norm", x, self.channels)?;
        let s = x.shape();
        let count = s.n * s.plane();
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.training() && count > 1 {
            let (mean, var) = channel_moments(x.value().data(), s);
            let stats = NormStats {
                invstd: var.iter().map(|&v| T::from_f64(1.0 / libm::sqrt(v + BN_EPS))).collect(),
                mean: mean.iter().map(|&m| T::from_f64(m)).collect(),
                batch_var: var.iter().map(|&v| T::from_f64(v * count as f64 / (count - 1) as f64)).collect(),
            };
            ctx.record_norm(NormUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean: stats.mean.clone(),
                batch_var: stats.batch_var.clone(),
            });
            Ok(ctx.tape.batch_norm(x, &gamma, &beta, &stats, true))
        } else {
            let mean = ctx.buffer(self.running_mean).data().to_vec();
            let invstd = ctx
                .buffer(self.running_var)
                .data()
                .iter()
                .map(|&v| T::from_f64(1.0 / libm::sqrt(v.to_f64() + BN_EPS)))
                .collect();
            let stats = NormStats { mean, invstd, batch_var: Vec::new() };
            Ok(ctx.tape.batch_norm(x, &gamma, &beta, &stats, false))
        }
    }
}

/// Per-channel mean and biased variance over batch and space, in f64.
fn channel_moments<T: Real>(data: &[T], s: Shape) -> (Vec<f64>, Vec<f64>) {
    let plane = s.plane();
    let m = (s.n * plane) as f64;
    let mut mean = alloc::vec![0.0f64; s.c];
    let mut var = alloc::vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            mean[c] += data[off..off + plane].iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            var[c] += data[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean[c];
                    d * d
                })
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

/// Channel counts and kernel of a [`ConvBlock`]. Padding always preserves the
/// spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl ConvBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, kernel_size: 3 }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self { kernel_size: 1, ..Self::new(in_channels, out_channels) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("conv block with zero channels: {self:?}")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("conv block kernel must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }
}

/// Convolution → batch normalisation → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, spec: ConvBlockSpec) -> Result<Self> {
        spec.validate()?;
        let conv = b.scoped("conv", |b| {
            Conv2d::new(b, spec.in_channels, spec.out_channels, ConvGeom::same(spec.kernel_size), false)
        });
        let bn = b.scoped("bn", |b| BatchNorm2d::new(b, spec.out_channels));
        Ok(Self { spec, conv, bn })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, &y)?;
        Ok(ctx.tape.relu(&y))
    }
}

/// Channel attention: average- and max-pooled channel descriptors pass
/// through a shared 1×1 bottleneck (reduce → normalise → ReLU → expand); their
/// sum through a sigmoid gives one weight in (0, 1) per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub reduce: Conv2d,
    pub bn: BatchNorm2d,
    pub expand: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Real>(b: &mut Builder<T>, channels: usize) -> Self {
        let hidden = (channels / CA_REDUCTION).max(1);
        Self {
            channels,
            reduce: b.scoped("reduce", |b| Conv2d::new(b, channels, hidden, ConvGeom::pointwise(), false)),
            bn: b.scoped("bn", |b| BatchNorm2d::new(b, hidden)),
            expand: b.scoped("expand", |b| Conv2d::new(b, hidden, channels, ConvGeom::pointwise(), false)),
        }
    }

    fn mlp<T: Real>(&self, ctx: &Ctx<'_, T>, pooled: &Var<T>) -> Result<Var<T>> {
        let h = self.reduce.forward(ctx, pooled)?;
        let h = self.bn.forward(ctx, &h)?;
        let h = ctx.tape.relu(&h);
        self.expand.forward(ctx, &h)
    }

    /// Per-channel weights, shape `N×C×1×1`.
    pub fn weights<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("channel attention", x, self.channels)?;
        let avg = self.mlp(ctx, &ctx.tape.global_avg_pool(x))?;
        let max = self.mlp(ctx, &ctx.tape.global_max_pool(x))?;
        Ok(ctx.tape.sigmoid(&ctx.tape.add(&avg, &max)))
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weights(ctx, x)?;
        Ok(ctx.tape.scale_channels(x, &w))
    }
}

/// Bilinear resampling to `target_h × target_w` (half-pixel centres).
pub fn resample<T: Real>(ctx: &Ctx<'_, T>, x: &Var<T>, target_h: usize, target_w: usize) -> Var<T> {
    ctx.tape.resize(x, target_h, target_w)
}
