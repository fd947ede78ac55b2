//! Dual-stream backbone: two structurally identical, independently
//! parameterised networks turning the RGB and thermal images into feature
//! pyramids (levels 2–5; the full-resolution first level is discarded).
//!
//! VGG16 taps levels 2–4 after pooling stages 2–4 and level 5 from the last
//! convolution stage with its pooling removed, giving strides 4, 8, 16, 16.
//! ResNet50 taps the four residual stages (strides 4, 8, 16, 32) and can also
//! expose its stride-2 stem for an extra decoder stage.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::Var;
use crate::blocks::{BatchNorm2d, Conv2d};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{Builder, Ctx};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Per-channel normalisation applied to both modalities before the backbone.
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Vgg16,
    ResNet50,
}

impl BackboneKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::Vgg16 => "vgg16",
            Self::ResNet50 => "resnet50",
        }
    }

    /// Channels of levels 2–5 at full width.
    pub fn level_channels(self) -> [usize; 4] {
        match self {
            Self::Vgg16 => [128, 256, 512, 512],
            Self::ResNet50 => [256, 512, 1024, 2048],
        }
    }

    pub fn level_strides(self) -> [usize; 4] {
        match self {
            Self::Vgg16 => [4, 8, 16, 16],
            Self::ResNet50 => [4, 8, 16, 32],
        }
    }

    pub fn stem_channels(self) -> usize {
        64
    }

    pub fn stem_stride(self) -> usize {
        2
    }

    /// Input sides must be multiples of this.
    pub fn input_multiple(self) -> usize {
        match self {
            Self::Vgg16 => 16,
            Self::ResNet50 => 32,
        }
    }

    /// Number of convolution layers carrying pretrained weights.
    pub fn conv_layers(self) -> usize {
        match self {
            Self::Vgg16 => 13,
            Self::ResNet50 => 53,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(Self::Vgg16),
            "resnet50" => Ok(Self::ResNet50),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Thermal,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Thermal => "thermal",
        }
    }
}

/// Encoder features of one modality.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Real> {
    pub backbone: BackboneKind,
    /// Stride-2 stem features (ResNet50 only, when requested).
    pub stem: Option<Var<T>>,
    /// Levels 2, 3, 4, 5.
    pub levels: [Var<T>; 4],
}

impl<T: Real> FeaturePyramid<T> {
    /// Encoder level `i` in `1..=5`; level 1 is the stem.
    pub fn level(&self, i: usize) -> &Var<T> {
        match i {
            1 => self.stem.as_ref().expect("pyramid has no stem features"),
            2..=5 => &self.levels[i - 2],
            _ => panic!("no encoder level {i}"),
        }
    }

    pub fn shapes(&self) -> [Shape; 4] {
        core::array::from_fn(|i| self.levels[i].shape())
    }
}

#[derive(Clone, Debug)]
struct VggConv {
    conv: Conv2d,
    pool_after: bool,
}

/// VGG16 feature extractor without its last pooling layer and classifier.
#[derive(Clone, Debug)]
pub struct Vgg16 {
    convs: Vec<VggConv>,
}

const VGG_STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];

impl Vgg16 {
    pub fn new<T: Real>(b: &mut Builder<T>, width_divisor: usize) -> Self {
        let mut convs = Vec::new();
        let mut in_c = 3;
        let mut index = 0;
        b.scoped("features", |b| {
            for (stage, &(width, reps)) in VGG_STAGES.iter().enumerate() {
                let out_c = width / width_divisor;
                for r in 0..reps {
                    let conv = b.scoped(&format!("{index}"), |b| Conv2d::new(b, in_c, out_c, ConvGeom::same(3), true));
                    in_c = out_c;
                    index += 2; // conv, relu
                    let pool_after = r + 1 == reps && stage < 4;
                    if pool_after {
                        index += 1;
                    }
                    convs.push(VggConv { conv, pool_after });
                }
            }
        });
        Self { convs }
    }

    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<[Var<T>; 4]> {
        let mut taps = Vec::with_capacity(4);
        let mut h = x.clone();
        let mut pools = 0;
        for c in &self.convs {
            h = ctx.tape.relu(&c.conv.forward(ctx, &h)?);
            if c.pool_after {
                h = ctx.tape.max_pool(&h, ConvGeom { kernel: 2, stride: 2, pad: 0 });
                pools += 1;
                if pools >= 2 {
                    taps.push(h.clone());
                }
            }
        }
        taps.push(h);
        Ok(taps.try_into().expect("four VGG taps"))
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<T: Real>(b: &mut Builder<T>, in_c: usize, width: usize, stride: usize) -> Self {
        let out_c = width * 4;
        let conv1 = b.scoped("conv1", |b| Conv2d::new(b, in_c, width, ConvGeom::pointwise(), false));
        let bn1 = b.scoped("bn1", |b| BatchNorm2d::new(b, width));
        let conv2 = b.scoped("conv2", |b| Conv2d::new(b, width, width, ConvGeom { kernel: 3, stride, pad: 1 }, false));
        let bn2 = b.scoped("bn2", |b| BatchNorm2d::new(b, width));
        let conv3 = b.scoped("conv3", |b| Conv2d::new(b, width, out_c, ConvGeom::pointwise(), false));
        let bn3 = b.scoped("bn3", |b| BatchNorm2d::new(b, out_c));
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            b.scoped("downsample", |b| {
                let conv =
                    b.scoped("0", |b| Conv2d::new(b, in_c, out_c, ConvGeom { kernel: 1, stride, pad: 0 }, false));
                let bn = b.scoped("1", |b| BatchNorm2d::new(b, out_c));
                (conv, bn)
            })
        });
        Self { conv1, bn1, conv2, bn2, conv3, bn3, downsample }
    }

    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = ctx.tape;
        let h = t.relu(&self.bn1.forward(ctx, &self.conv1.forward(ctx, x)?)?);
        let h = t.relu(&self.bn2.forward(ctx, &self.conv2.forward(ctx, &h)?)?);
        let h = self.bn3.forward(ctx, &self.conv3.forward(ctx, &h)?)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)?)?,
            None => x.clone(),
        };
        Ok(t.relu(&t.add(&h, &skip)))
    }
}

/// ResNet50 (bottleneck v1.5, stride on the 3×3 convolution).
#[derive(Clone, Debug)]
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
}

const RESNET_LAYERS: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];

impl ResNet50 {
    pub fn new<T: Real>(b: &mut Builder<T>, width_divisor: usize) -> Self {
        let stem = 64 / width_divisor;
        let conv1 = b.scoped("conv1", |b| Conv2d::new(b, 3, stem, ConvGeom { kernel: 7, stride: 2, pad: 3 }, false));
        let bn1 = b.scoped("bn1", |b| BatchNorm2d::new(b, stem));
        let mut in_c = stem;
        let mut layers = Vec::new();
        for (li, &(width, blocks, stride)) in RESNET_LAYERS.iter().enumerate() {
            let width = width / width_divisor;
            let layer = b.scoped(&format!("layer{}", li + 1), |b| {
                (0..blocks)
                    .map(|bi| {
                        let blk = b.scoped(&format!("{bi}"), |b| {
                            Bottleneck::new(b, in_c, width, if bi == 0 { stride } else { 1 })
                        });
                        in_c = width * 4;
                        blk
                    })
                    .collect()
            });
            layers.push(layer);
        }
        Self { conv1, bn1, layers }
    }

    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<(Var<T>, [Var<T>; 4])> {
        let t = ctx.tape;
        let stem = t.relu(&self.bn1.forward(ctx, &self.conv1.forward(ctx, x)?)?);
        let mut h = t.max_pool(&stem, ConvGeom { kernel: 3, stride: 2, pad: 1 });
        let mut taps = Vec::with_capacity(4);
        for layer in &self.layers {
            for blk in layer {
                h = blk.forward(ctx, &h)?;
            }
            taps.push(h.clone());
        }
        Ok((stem, taps.try_into().expect("four residual stages")))
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Vgg16(Vgg16),
    ResNet50(ResNet50),
}

impl Backbone {
    pub fn new<T: Real>(b: &mut Builder<T>, kind: BackboneKind, width_divisor: usize) -> Self {
        match kind {
            BackboneKind::Vgg16 => Self::Vgg16(Vgg16::new(b, width_divisor)),
            BackboneKind::ResNet50 => Self::ResNet50(ResNet50::new(b, width_divisor)),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Self::Vgg16(_) => BackboneKind::Vgg16,
            Self::ResNet50(_) => BackboneKind::ResNet50,
        }
    }
}

/// Prefix under which each stream's backbone parameters are stored.
pub fn stream_prefix(stream: Stream) -> String {
    format!("encoder.{}.", stream.name())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub kind: BackboneKind,
    pub width_divisor: usize,
    rgb: Backbone,
    thermal: Backbone,
    keep_stem: bool,
}

impl Encoder {
    pub fn new<T: Real>(b: &mut Builder<T>, kind: BackboneKind, width_divisor: usize, keep_stem: bool) -> Self {
        let (rgb, thermal) = b.scoped("encoder", |b| {
            let rgb = b.scoped("rgb", |b| Backbone::new(b, kind, width_divisor));
            let thermal = b.scoped("thermal", |b| Backbone::new(b, kind, width_divisor));
            (rgb, thermal)
        });
        Self { kind, width_divisor, rgb, thermal, keep_stem: keep_stem && kind == BackboneKind::ResNet50 }
    }

    pub fn level_channels(&self) -> [usize; 4] {
        self.kind.level_channels().map(|c| c / self.width_divisor)
    }

    pub fn stem_channels(&self) -> usize {
        self.kind.stem_channels() / self.width_divisor
    }

    /// Check a `N×3×H×W` image batch against the backbone's stride contract.
    pub fn validate_input(&self, s: Shape) -> Result<()> {
        let m = self.kind.input_multiple();
        if s.c != 3 {
            return Err(Error::Input(format!("expected a 3-channel image, got {} channels", s.c)));
        }
        if s.h == 0 || s.w == 0 || s.h % m != 0 || s.w % m != 0 {
            return Err(Error::Input(format!(
                "image size {}x{} is not a positive multiple of {m} required by {}",
                s.h, s.w, self.kind
            )));
        }
        Ok(())
    }

    /// Feature pyramid of one modality from a raw `[0, 1]` image batch.
    pub fn extract_pyramid<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        image: &Tensor<T>,
        stream: Stream,
    ) -> Result<FeaturePyramid<T>> {
        self.validate_input(image.shape())?;
        let x = ctx.tape.constant(normalize_input(image));
        let backbone = match stream {
            Stream::Rgb => &self.rgb,
            Stream::Thermal => &self.thermal,
        };
        match backbone {
            Backbone::Vgg16(v) => {
                Ok(FeaturePyramid { backbone: BackboneKind::Vgg16, stem: None, levels: v.forward(ctx, &x)? })
            }
            Backbone::ResNet50(r) => {
                let (stem, levels) = r.forward(ctx, &x)?;
                Ok(FeaturePyramid { backbone: BackboneKind::ResNet50, stem: self.keep_stem.then_some(stem), levels })
            }
        }
    }
}

/// `(x − mean_c) / std_c` per channel.
pub fn normalize_input<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape();
    let mut out = image.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, sd) = (T::from_f64(INPUT_MEAN[c % 3]), T::from_f64(INPUT_STD[c % 3]));
            for v in out.plane_mut(n, c) {
                *v = (*v - m) / sd;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::Mode;

    #[test]
    fn vgg_parameter_names_follow_torchvision_indices() {
        let mut b = Builder::<f32>::new(0);
        let _enc = Encoder::new(&mut b, BackboneKind::Vgg16, 8, false);
        let store = b.finish();
        let convs: Vec<&str> =
            store.names_with_prefix("encoder.rgb.features.").filter(|n| n.ends_with(".weight")).collect();
        assert_eq!(convs.len(), 13);
        for idx in [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28] {
            assert!(store.find(&format!("encoder.thermal.features.{idx}.weight")).is_some(), "{idx}");
        }
    }

    #[test]
    fn tiny_vgg_pyramid_strides() {
        let mut b = Builder::<f32>::new(0);
        let enc = Encoder::new(&mut b, BackboneKind::Vgg16, 8, false);
        let store = b.finish();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let img = Tensor::zeros(Shape::new(1, 3, 64, 64));
        let p = enc.extract_pyramid(&ctx, &img, Stream::Rgb).unwrap();
        let spatial: Vec<(usize, usize)> = p.shapes().iter().map(|s| (s.h, s.w)).collect();
        assert_eq!(spatial, [(16, 16), (8, 8), (4, 4), (4, 4)]);
        assert_eq!(p.shapes().map(|s| s.c), [16, 32, 64, 64]);
        assert!(p.levels.iter().all(|l| l.value().all_finite()));
    }

    #[test]
    fn tiny_resnet_pyramid_strides() {
        let mut b = Builder::<f32>::new(0);
        let enc = Encoder::new(&mut b, BackboneKind::ResNet50, 8, true);
        let store = b.finish();
        // Convolution kernels are the only weights with more than one output row.
        let convs = store
            .iter()
            .filter(|(_, e)| {
                e.name.starts_with("encoder.rgb.") && e.name.ends_with(".weight") && e.value().shape().n > 1
            })
            .count();
        assert_eq!(convs, BackboneKind::ResNet50.conv_layers());
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let img = Tensor::full(Shape::new(1, 3, 64, 64), 0.5);
        let p = enc.extract_pyramid(&ctx, &img, Stream::Thermal).unwrap();
        assert_eq!(p.shapes().map(|s| s.h), [16, 8, 4, 2]);
        assert_eq!(p.shapes().map(|s| s.c), [32, 64, 128, 256]);
        assert_eq!(p.level(1).shape(), Shape::new(1, 8, 32, 32));
    }

    #[test]
    fn indivisible_input_is_rejected_before_compute() {
        let mut b = Builder::<f32>::new(0);
        let enc = Encoder::new(&mut b, BackboneKind::Vgg16, 8, false);
        let store = b.finish();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let err = enc.extract_pyramid(&ctx, &Tensor::zeros(Shape::new(1, 3, 60, 64)), Stream::Rgb).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(tape.is_empty());
    }
}
