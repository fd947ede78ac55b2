//! Global information module: fuses the top-level features of both
//! modalities into a multi-receptive-field context map `G` and an auxiliary
//! saliency score `S_g` at the same resolution.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::blocks::{resample, ChannelAttention, Conv2d, ConvBlock, ConvBlockSpec};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{Builder, Ctx};
use crate::real::Real;

/// Adaptive max-pool output sizes of the pyramid branches.
pub const POOL_SIZES: [usize; 4] = [1, 5, 9, 13];
/// Channels of `G` at full width.
pub const CONTEXT_CHANNELS: usize = 256;

/// Pool sizes clipped to a `side × side` top-level map, deduplicated in order.
/// Only reduced test inputs trigger the clipping.
pub fn clipped_pool_sizes(side: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for n in POOL_SIZES {
        let n = n.min(side).max(1);
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct GlobalContext<T: Real> {
    pub g: Var<T>,
    /// Sigmoid score at the resolution of `g`.
    pub s_g: Var<T>,
}

#[derive(Clone, Debug)]
struct PoolBranch {
    size: usize,
    conv: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct Gim {
    pub in_channels: usize,
    pub channels: usize,
    pub pool_sizes: Vec<usize>,
    ca: ChannelAttention,
    reduce: ConvBlock,
    branches: Vec<PoolBranch>,
    fuse: ConvBlock,
    score: Conv2d,
}

impl Gim {
    /// `top_channels` is the channel count of one modality's level-5 map and
    /// `top_side` its expected spatial side (for pool-size clipping).
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        top_channels: usize,
        top_side: usize,
        width_divisor: usize,
    ) -> Result<Self> {
        let in_channels = 2 * top_channels;
        let channels = CONTEXT_CHANNELS / width_divisor;
        let pool_sizes = clipped_pool_sizes(top_side);
        let ca = b.scoped("ca", |b| ChannelAttention::new(b, in_channels));
        let reduce = b.scoped("reduce", |b| ConvBlock::new(b, ConvBlockSpec::new(in_channels, channels)))?;
        let mut branches = Vec::with_capacity(pool_sizes.len());
        for (i, &size) in pool_sizes.iter().enumerate() {
            let conv =
                b.scoped(&format!("branch{i}"), |b| ConvBlock::new(b, ConvBlockSpec::new(channels, channels)))?;
            branches.push(PoolBranch { size, conv });
        }
        let fuse_in = (pool_sizes.len() + 1) * channels;
        let fuse = b.scoped("fuse", |b| ConvBlock::new(b, ConvBlockSpec::new(fuse_in, channels)))?;
        let score = b.scoped("score", |b| Conv2d::new(b, channels, 1, ConvGeom::pointwise(), true));
        Ok(Self { in_channels, channels, pool_sizes, ca, reduce, branches, fuse, score })
    }

    /// `F = Conv(CA([r5 ∥ t5]))`.
    pub fn reduce<T: Real>(&self, ctx: &Ctx<'_, T>, r5: &Var<T>, t5: &Var<T>) -> Result<Var<T>> {
        if r5.shape() != t5.shape() {
            return Err(Error::Config(format!(
                "modal top-level features differ in shape: {} vs {}",
                r5.shape(),
                t5.shape()
            )));
        }
        let x = ctx.tape.concat(&[r5.clone(), t5.clone()]);
        let x = self.ca.forward(ctx, &x)?;
        self.reduce.forward(ctx, &x)
    }

    /// Pooled `n×n` map of branch `i` before its convolution.
    pub fn branch_pooled<T: Real>(&self, ctx: &Ctx<'_, T>, i: usize, f: &Var<T>) -> Var<T> {
        let n = self.branches[i].size;
        ctx.tape.adaptive_max_pool(f, n, n)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, r5: &Var<T>, t5: &Var<T>) -> Result<GlobalContext<T>> {
        let f = self.reduce(ctx, r5, t5)?;
        let s = f.shape();
        let mut parts = Vec::with_capacity(self.branches.len() + 1);
        for (i, branch) in self.branches.iter().enumerate() {
            let pooled = self.branch_pooled(ctx, i, &f);
            let y = branch.conv.forward(ctx, &pooled)?;
            parts.push(resample(ctx, &y, s.h, s.w));
        }
        parts.push(f);
        let g = self.fuse.forward(ctx, &ctx.tape.concat(&parts))?;
        let s_g = ctx.tape.sigmoid(&self.score.forward(ctx, &g)?);
        Ok(GlobalContext { g, s_g })
    }
}
