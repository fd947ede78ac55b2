//! Siamese decoder. Each modality branch is a top-down cascade of
//! multi-interaction blocks (MIBs); every block fuses three cues at one
//! encoder level: the previous decoded features (of both branches when the
//! modalities interact), this branch's encoder features and the global
//! context. Score heads turn the last level into saliency maps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::blocks::{resample, ChannelAttention, Conv2d, ConvBlock, ConvBlockSpec};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{Builder, Ctx};
use crate::real::Real;

/// Width of every MIB output at full network width.
pub const DECODER_CHANNELS: usize = 128;

/// One multi-interaction block.
#[derive(Clone, Debug)]
pub struct Mib {
    pub channels: usize,
    ca_a: ChannelAttention,
    conv_a: ConvBlock,
    ca_m: ChannelAttention,
    conv_m: ConvBlock,
    conv_g: Option<ConvBlock>,
    conv_z: ConvBlock,
}

impl Mib {
    /// `g_channels` is `None` when the global context is not wired in.
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        a_channels: usize,
        m_channels: usize,
        g_channels: Option<usize>,
        channels: usize,
    ) -> Result<Self> {
        let ca_a = b.scoped("ca_a", |b| ChannelAttention::new(b, a_channels));
        let conv_a = b.scoped("conv_a", |b| ConvBlock::new(b, ConvBlockSpec::new(a_channels, channels)))?;
        let ca_m = b.scoped("ca_m", |b| ChannelAttention::new(b, m_channels));
        let conv_m = b.scoped("conv_m", |b| ConvBlock::new(b, ConvBlockSpec::new(m_channels, channels)))?;
        let conv_g = match g_channels {
            Some(gc) => Some(b.scoped("conv_g", |b| ConvBlock::new(b, ConvBlockSpec::new(gc, channels)))?),
            None => None,
        };
        let conv_z = b.scoped("conv_z", |b| ConvBlock::new(b, ConvBlockSpec::new(channels, channels)))?;
        Ok(Self { channels, ca_a, conv_a, ca_m, conv_m, conv_g, conv_z })
    }

    pub fn uses_global(&self) -> bool {
        self.conv_g.is_some()
    }

    /// The summands `Ã`, `M̃` and (if wired) `G̃`, all at the size of `a`.
    pub fn summands<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        m_prev: &Var<T>,
        a: &Var<T>,
        g: Option<&Var<T>>,
    ) -> Result<Vec<Var<T>>> {
        let (h, w) = (a.shape().h, a.shape().w);
        let a_t = self.conv_a.forward(ctx, &self.ca_a.forward(ctx, a)?)?;
        let m = self.ca_m.forward(ctx, m_prev)?;
        let m_t = self.conv_m.forward(ctx, &resample(ctx, &m, h, w))?;
        let mut parts = vec![m_t];
        if let Some(conv_g) = &self.conv_g {
            let g = g.ok_or_else(|| Error::Config("block expects the global context".into()))?;
            parts.push(conv_g.forward(ctx, &resample(ctx, g, h, w))?);
        }
        parts.push(a_t);
        for p in &parts {
            assert_eq!(p.shape(), parts[0].shape(), "MIB summands disagree after resampling");
        }
        Ok(parts)
    }

    /// `Z = Conv(Σ parts)`.
    pub fn fuse<T: Real>(&self, ctx: &Ctx<'_, T>, parts: &[Var<T>]) -> Result<Var<T>> {
        let mut sum = parts[0].clone();
        for p in &parts[1..] {
            sum = ctx.tape.add(&sum, p);
        }
        self.conv_z.forward(ctx, &sum)
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        m_prev: &Var<T>,
        a: &Var<T>,
        g: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let parts = self.summands(ctx, m_prev, a, g)?;
        self.fuse(ctx, &parts)
    }
}

/// How the two modalities are decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// Two branches. With `interaction`, each block sees both branches'
    /// previous outputs; otherwise only its own. `shared` ties the branch
    /// weights.
    Siamese { interaction: bool, shared: bool },
    /// One stream over concatenated modalities.
    Single,
}

#[derive(Clone, Debug)]
pub struct DecoderSpec {
    /// Encoder levels decoded top-down, e.g. `[4, 3, 2]`.
    pub levels: Vec<usize>,
    /// Per-modality channels of each entry in `levels`.
    pub level_channels: Vec<usize>,
    /// Per-modality channels of level 5.
    pub top_channels: usize,
    pub channels: usize,
    /// Channels of `G`, or `None` to decode without it.
    pub global_channels: Option<usize>,
    pub mode: DecoderMode,
}

/// Output of one MIB group: one map per branch (two, or one for the single
/// decoder).
#[derive(Clone, Debug)]
pub struct MibState<T: Real> {
    pub level: usize,
    pub z: Vec<Var<T>>,
}

impl<T: Real> MibState<T> {
    pub fn z_rgb(&self) -> &Var<T> {
        &self.z[0]
    }

    pub fn z_t(&self) -> Option<&Var<T>> {
        self.z.get(1)
    }
}

#[derive(Clone, Debug)]
enum Branches {
    Independent { rgb: Vec<Mib>, thermal: Vec<Mib> },
    Shared(Vec<Mib>),
    Single(Vec<Mib>),
}

#[derive(Clone, Debug)]
pub struct SiameseDecoder {
    pub spec: DecoderSpec,
    branches: Branches,
}

impl SiameseDecoder {
    pub fn new<T: Real>(b: &mut Builder<T>, spec: DecoderSpec) -> Result<Self> {
        if spec.levels.len() != spec.level_channels.len() || spec.levels.is_empty() {
            return Err(Error::Config("decoder levels and channels disagree".into()));
        }
        let build = |b: &mut Builder<T>, a_mult: usize, m_first: usize, m_rest: usize| -> Result<Vec<Mib>> {
            let mut mibs = Vec::with_capacity(spec.levels.len());
            for (k, (&level, &a_c)) in spec.levels.iter().zip(&spec.level_channels).enumerate() {
                let m_c = if k == 0 { m_first } else { m_rest };
                mibs.push(b.scoped(&format!("level{level}"), |b| {
                    Mib::new(b, a_mult * a_c, m_c, spec.global_channels, spec.channels)
                })?);
            }
            Ok(mibs)
        };
        let (top, dc) = (spec.top_channels, spec.channels);
        let branches = match spec.mode {
            DecoderMode::Single => Branches::Single(b.scoped("single", |b| build(b, 2, 2 * top, dc))?),
            DecoderMode::Siamese { interaction, shared } => {
                let (m_first, m_rest) = if interaction { (2 * top, 2 * dc) } else { (top, dc) };
                if shared {
                    Branches::Shared(b.scoped("shared", |b| build(b, 1, m_first, m_rest))?)
                } else {
                    Branches::Independent {
                        rgb: b.scoped("rgb", |b| build(b, 1, m_first, m_rest))?,
                        thermal: b.scoped("thermal", |b| build(b, 1, m_first, m_rest))?,
                    }
                }
            }
        };
        Ok(Self { spec, branches })
    }

    /// Number of decoder streams that produce an output (2, or 1 for the
    /// single decoder).
    pub fn outputs(&self) -> usize {
        match self.branches {
            Branches::Single(_) => 1,
            _ => 2,
        }
    }

    /// Number of distinct parameter sets.
    pub fn parameter_sets(&self) -> usize {
        match self.branches {
            Branches::Independent { .. } => 2,
            _ => 1,
        }
    }

    /// Decode both pyramids top-down; returns one state per level in
    /// `spec.levels` order (the last is the finest).
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        rgb: &FeaturePyramid<T>,
        thermal: &FeaturePyramid<T>,
        g: Option<&Var<T>>,
    ) -> Result<Vec<MibState<T>>> {
        let tape = ctx.tape;
        let g = if self.spec.global_channels.is_some() { g } else { None };
        let mut states = Vec::with_capacity(self.spec.levels.len());
        let (r5, t5) = (rgb.level(5), thermal.level(5));
        match &self.branches {
            Branches::Single(mibs) => {
                let mut m = tape.concat(&[r5.clone(), t5.clone()]);
                for (mib, &level) in mibs.iter().zip(&self.spec.levels) {
                    let a = tape.concat(&[rgb.level(level).clone(), thermal.level(level).clone()]);
                    let z = mib.forward(ctx, &m, &a, g)?;
                    m = z.clone();
                    states.push(MibState { level, z: vec![z] });
                }
            }
            Branches::Independent { .. } | Branches::Shared(_) => {
                let (mibs_r, mibs_t) = match &self.branches {
                    Branches::Independent { rgb, thermal } => (rgb, thermal),
                    Branches::Shared(m) => (m, m),
                    Branches::Single(_) => unreachable!(),
                };
                let interaction = matches!(self.spec.mode, DecoderMode::Siamese { interaction: true, .. });
                let (mut m_r, mut m_t) = if interaction {
                    let m = tape.concat(&[r5.clone(), t5.clone()]);
                    (m.clone(), m)
                } else {
                    (r5.clone(), t5.clone())
                };
                for ((mr, mt), &level) in mibs_r.iter().zip(mibs_t).zip(&self.spec.levels) {
                    let z_r = mr.forward(ctx, &m_r, rgb.level(level), g)?;
                    let z_t = mt.forward(ctx, &m_t, thermal.level(level), g)?;
                    if interaction {
                        let m = tape.concat(&[z_r.clone(), z_t.clone()]);
                        m_r = m.clone();
                        m_t = m;
                    } else {
                        m_r = z_r.clone();
                        m_t = z_t.clone();
                    }
                    states.push(MibState { level, z: vec![z_r, z_t] });
                }
            }
        }
        Ok(states)
    }
}

/// Branch score heads and the final fusion head.
#[derive(Clone, Debug)]
pub struct Heads {
    branch: Option<[Conv2d; 2]>,
    final_ca: ChannelAttention,
    final_score: Conv2d,
}

impl Heads {
    /// `streams` is the number of decoder outputs fused by the final head.
    pub fn new<T: Real>(b: &mut Builder<T>, channels: usize, streams: usize, branch_heads: bool) -> Self {
        let branch = branch_heads.then(|| {
            [
                b.scoped("rgb", |b| Conv2d::new(b, channels, 1, ConvGeom::pointwise(), true)),
                b.scoped("thermal", |b| Conv2d::new(b, channels, 1, ConvGeom::pointwise(), true)),
            ]
        });
        let fused = streams * channels;
        let final_ca = b.scoped("final", |b| b.scoped("ca", |b| ChannelAttention::new(b, fused)));
        let final_score =
            b.scoped("final", |b| b.scoped("score", |b| Conv2d::new(b, fused, 1, ConvGeom::pointwise(), true)));
        Self { branch, final_ca, final_score }
    }

    pub fn has_branch_heads(&self) -> bool {
        self.branch.is_some()
    }

    /// 1×1 score → sigmoid → bilinear resample, for branch `i` (0 = RGB).
    pub fn branch_score<T: Real>(&self, ctx: &Ctx<'_, T>, i: usize, z: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let heads = self.branch.as_ref().ok_or_else(|| Error::Config("network has no branch heads".into()))?;
        let s = ctx.tape.sigmoid(&heads[i].forward(ctx, z)?);
        Ok(resample(ctx, &s, h, w))
    }

    /// `CA([z_rgb ∥ z_t])` → 1×1 score → sigmoid → upsample to `h × w`.
    pub fn fuse_final<T: Real>(&self, ctx: &Ctx<'_, T>, state: &MibState<T>, h: usize, w: usize) -> Result<Var<T>> {
        let x = if state.z.len() == 1 { state.z[0].clone() } else { ctx.tape.concat(&state.z) };
        let x = self.final_ca.forward(ctx, &x)?;
        let s = ctx.tape.sigmoid(&self.final_score.forward(ctx, &x)?);
        Ok(resample(ctx, &s, h, w))
    }
}
