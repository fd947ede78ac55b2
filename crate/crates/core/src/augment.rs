//! Training-time augmentation: noisy-modality corruption (one modality
//! replaced by a black or standard-normal image) and horizontal flipping.
//!
//! Randomness is drawn from per-sample ChaCha streams keyed by
//! `(seed, epoch, index)`, so results do not depend on which worker loads a
//! sample or in which order.

use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{Stream, INPUT_MEAN, INPUT_STD};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Domain separators for the per-sample streams.
const CORRUPT_DOMAIN: u64 = 0x636f_7272_7570_7400;
const FLIP_DOMAIN: u64 = 0x666c_6970_0000_0000;

/// Where replacement values live. `Raw` writes them into the `[0, 1]` image
/// before backbone normalisation; `Normalized` writes raw values that
/// normalise to them (zero becomes the channel mean).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionStage {
    Raw,
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionPolicy {
    pub p_corrupt: f64,
    pub p_pick_rgb: f64,
    /// Probability that a corrupted modality becomes zeros rather than noise.
    pub p_zero_vs_noise: f64,
    pub seed: u64,
    pub stage: CorruptionStage,
    /// Clamp noise to `[0, 1]` (off: plain standard normal).
    pub clip_noise: bool,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        Self {
            p_corrupt: 0.1,
            p_pick_rgb: 0.5,
            p_zero_vs_noise: 0.5,
            seed: 0,
            stage: CorruptionStage::Raw,
            clip_noise: false,
        }
    }
}

impl CorruptionPolicy {
    pub fn disabled() -> Self {
        Self { p_corrupt: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in
            [("p_corrupt", self.p_corrupt), ("p_pick_rgb", self.p_pick_rgb), ("p_zero_vs_noise", self.p_zero_vs_noise)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionKind {
    Zero,
    Noise,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Noise => "noise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionRecord {
    None,
    Replaced { modality: Stream, kind: CorruptionKind },
}

/// The random stream of one sample in one epoch.
pub fn sample_rng(seed: u64, domain: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// Decide whether and how to corrupt, without touching any image.
pub fn draw_corruption<R: Rng>(policy: &CorruptionPolicy, rng: &mut R) -> CorruptionRecord {
    if !rng.random_bool(policy.p_corrupt) {
        return CorruptionRecord::None;
    }
    let modality = if rng.random_bool(policy.p_pick_rgb) { Stream::Rgb } else { Stream::Thermal };
    let kind = if rng.random_bool(policy.p_zero_vs_noise) { CorruptionKind::Zero } else { CorruptionKind::Noise };
    CorruptionRecord::Replaced { modality, kind }
}

/// Overwrite an `N×3×H×W` image with zeros or i.i.d. standard-normal noise.
pub fn replace_image<T: Real, R: Rng>(
    image: &mut Tensor<T>,
    kind: CorruptionKind,
    stage: CorruptionStage,
    clip: bool,
    rng: &mut R,
) {
    let s = image.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            let (mean, std) = match stage {
                CorruptionStage::Raw => (0.0, 1.0),
                CorruptionStage::Normalized => (INPUT_MEAN[c % 3], INPUT_STD[c % 3]),
            };
            for v in image.plane_mut(n, c) {
                let z = match kind {
                    CorruptionKind::Zero => 0.0,
                    CorruptionKind::Noise => StandardNormal.sample(rng),
                };
                let mut raw = mean + std * z;
                if clip {
                    raw = raw.clamp(0.0, 1.0);
                }
                *v = T::from_f64(raw);
            }
        }
    }
}

/// Apply the policy to one aligned pair. The ground truth is never touched.
pub fn maybe_corrupt<T: Real, R: Rng>(
    rgb: &mut Tensor<T>,
    thermal: &mut Tensor<T>,
    policy: &CorruptionPolicy,
    rng: &mut R,
) -> CorruptionRecord {
    let record = draw_corruption(policy, rng);
    if let CorruptionRecord::Replaced { modality, kind } = record {
        let target = match modality {
            Stream::Rgb => rgb,
            Stream::Thermal => thermal,
        };
        replace_image(target, kind, policy.stage, policy.clip_noise, rng);
    }
    record
}

/// Horizontal flip of both modalities and the mask with probability
/// `p_flip`; returns whether the flip happened.
pub fn standard_augment<T: Real, R: Rng>(
    rgb: &mut Tensor<T>,
    thermal: &mut Tensor<T>,
    mask: &mut Tensor<T>,
    p_flip: f64,
    rng: &mut R,
) -> bool {
    let flip = rng.random_bool(p_flip);
    if flip {
        *rgb = rgb.flip_horizontal();
        *thermal = thermal.flip_horizontal();
        *mask = mask.flip_horizontal();
    }
    flip
}

/// What happened to one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentRecord {
    pub flipped: bool,
    pub corruption: CorruptionRecord,
}

/// Flip, then corrupt, one sample with streams keyed by `(epoch, index)`.
pub fn augment_sample<T: Real>(
    rgb: &mut Tensor<T>,
    thermal: &mut Tensor<T>,
    mask: &mut Tensor<T>,
    policy: &CorruptionPolicy,
    p_flip: f64,
    epoch: u64,
    index: u64,
) -> AugmentRecord {
    let mut flip_rng = sample_rng(policy.seed, FLIP_DOMAIN, epoch, index);
    let flipped = standard_augment(rgb, thermal, mask, p_flip, &mut flip_rng);
    let mut rng = sample_rng(policy.seed, CORRUPT_DOMAIN, epoch, index);
    let corruption = maybe_corrupt(rgb, thermal, policy, &mut rng);
    AugmentRecord { flipped, corruption }
}
