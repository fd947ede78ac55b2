//! The full network: dual-stream encoder → global information module →
//! Siamese decoder → score heads, with the ablation switches of the
//! architecture study.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::decoder::{DecoderMode, DecoderSpec, Heads, MibState, SiameseDecoder, DECODER_CHANNELS};
use crate::encoder::{BackboneKind, Encoder, FeaturePyramid, Stream};
use crate::error::{Error, Result};
use crate::gim::{Gim, GlobalContext};
use crate::params::{Builder, Ctx, Mode, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Backbone configuration, including the variant with an extra decoder stage
/// on the ResNet stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Vgg16,
    ResNet50,
    ResNet50Plus,
}

impl Variant {
    pub fn kind(self) -> BackboneKind {
        match self {
            Self::Vgg16 => BackboneKind::Vgg16,
            Self::ResNet50 | Self::ResNet50Plus => BackboneKind::ResNet50,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::Vgg16 => "vgg16",
            Self::ResNet50 => "resnet50",
            Self::ResNet50Plus => "resnet50plus",
        }
    }

    /// Encoder levels decoded top-down.
    pub fn decoder_levels(self) -> &'static [usize] {
        match self {
            Self::ResNet50Plus => &[4, 3, 2, 1],
            _ => &[4, 3, 2],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(Self::Vgg16),
            "resnet50" => Ok(Self::ResNet50),
            "resnet50plus" => Ok(Self::ResNet50Plus),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Architecture and objective switches. The default is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Branch score heads and their loss term.
    pub branch_supervision: bool,
    /// Global context fed to every MIB.
    pub global_interaction: bool,
    /// Each branch sees both branches' previous outputs.
    pub modality_interaction: bool,
    /// One decoder over concatenated modalities.
    pub single_decoder: bool,
    /// Tie the two branches' MIB weights.
    pub share_branch_weights: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            branch_supervision: true,
            global_interaction: true,
            modality_interaction: true,
            single_decoder: false,
            share_branch_weights: false,
        }
    }
}

impl Ablation {
    pub const KEYS: [&'static str; 5] =
        ["branch_supervision", "global_interaction", "modality_interaction", "single_decoder", "share_branch_weights"];

    pub fn get(&self, key: &str) -> Option<bool> {
        Some(match key {
            "branch_supervision" => self.branch_supervision,
            "global_interaction" => self.global_interaction,
            "modality_interaction" => self.modality_interaction,
            "single_decoder" => self.single_decoder,
            "share_branch_weights" => self.share_branch_weights,
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: bool) -> Result<()> {
        let slot = match key {
            "branch_supervision" => &mut self.branch_supervision,
            "global_interaction" => &mut self.global_interaction,
            "modality_interaction" => &mut self.modality_interaction,
            "single_decoder" => &mut self.single_decoder,
            "share_branch_weights" => &mut self.share_branch_weights,
            other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
        };
        *slot = value;
        Ok(())
    }

    /// Branch heads exist only for two-branch decoders with supervision.
    pub fn has_branch_heads(&self) -> bool {
        self.branch_supervision && !self.single_decoder
    }

    fn decoder_mode(&self) -> DecoderMode {
        if self.single_decoder {
            DecoderMode::Single
        } else {
            DecoderMode::Siamese { interaction: self.modality_interaction, shared: self.share_branch_weights }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Every channel count is divided by this (1 = full width).
    pub width_divisor: usize,
    /// Side of the square training/inference input.
    pub input_size: usize,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn full(variant: Variant) -> Self {
        Self { variant, width_divisor: 1, input_size: 352, ablation: Ablation::default() }
    }

    /// Reduced configuration for tests: widths ÷8 at 64×64.
    pub fn tiny() -> Self {
        Self { variant: Variant::Vgg16, width_divisor: 8, input_size: 64, ablation: Ablation::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width_divisor;
        if d == 0 || 64 % d != 0 {
            return Err(Error::Config(format!("width divisor must divide 64, got {d}")));
        }
        let m = self.variant.kind().input_multiple();
        if self.input_size == 0 || self.input_size % m != 0 {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of {m} required by {}",
                self.input_size, self.variant
            )));
        }
        if self.ablation.single_decoder && self.ablation.share_branch_weights {
            return Err(Error::Config("share_branch_weights has no meaning with single_decoder".into()));
        }
        Ok(())
    }

    /// Spatial side of the global context for the configured input.
    pub fn context_side(&self) -> usize {
        self.input_size / self.variant.kind().level_strides()[3]
    }
}

/// Emitted saliency maps; all in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SaliencyOutputs<T: Real> {
    /// Final prediction at input resolution.
    pub sf: Var<T>,
    /// Global score at the context resolution.
    pub sg: Var<T>,
    /// RGB and thermal branch predictions at input resolution, when the
    /// network has branch heads.
    pub branches: Option<[Var<T>; 2]>,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward<T: Real> {
    pub outputs: SaliencyOutputs<T>,
    pub context: GlobalContext<T>,
    /// Decoder states, coarsest first.
    pub states: Vec<MibState<T>>,
}

/// The network structure together with its parameters.
#[derive(Clone, Debug)]
pub struct SiamDecoder<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub gim: Gim,
    pub decoder: SiameseDecoder,
    pub heads: Heads,
}

impl<T: Real> SiamDecoder<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width_divisor;
        let mut b = Builder::<T>::new(seed);
        let kind = config.variant.kind();
        let encoder = Encoder::new(&mut b, kind, d, config.variant == Variant::ResNet50Plus);
        let level_ch = encoder.level_channels();
        let top = level_ch[3];
        let gim = b.scoped("gim", |b| Gim::new(b, top, config.context_side(), d))?;
        let dc = DECODER_CHANNELS / d;
        let levels = config.variant.decoder_levels().to_vec();
        let level_channels =
            levels.iter().map(|&l| if l == 1 { encoder.stem_channels() } else { level_ch[l - 2] }).collect();
        let spec = DecoderSpec {
            levels,
            level_channels,
            top_channels: top,
            channels: dc,
            global_channels: config.ablation.global_interaction.then_some(gim.channels),
            mode: config.ablation.decoder_mode(),
        };
        let decoder = b.scoped("decoder", |b| SiameseDecoder::new(b, spec))?;
        let heads = b.scoped("head", |b| Heads::new(b, dc, decoder.outputs(), config.ablation.has_branch_heads()));
        Ok(Self { config, params: b.finish(), encoder, gim, decoder, heads })
    }

    /// Both modality pyramids from raw `[0, 1]` image batches.
    pub fn encode(&self, ctx: &Ctx<'_, T>, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<[FeaturePyramid<T>; 2]> {
        if rgb.shape() != thermal.shape() {
            return Err(Error::Input(format!(
                "RGB and thermal batches differ in shape: {} vs {}",
                rgb.shape(),
                thermal.shape()
            )));
        }
        self.encoder.validate_input(rgb.shape())?;
        Ok([
            self.encoder.extract_pyramid(ctx, rgb, Stream::Rgb)?,
            self.encoder.extract_pyramid(ctx, thermal, Stream::Thermal)?,
        ])
    }

    pub fn global_context(&self, ctx: &Ctx<'_, T>, pyramids: &[FeaturePyramid<T>; 2]) -> Result<GlobalContext<T>> {
        self.gim.forward(ctx, pyramids[0].level(5), pyramids[1].level(5))
    }

    /// Decoder and heads given encoder features and a (possibly altered)
    /// global context; `out_h × out_w` is the prediction size.
    pub fn decode(
        &self,
        ctx: &Ctx<'_, T>,
        pyramids: &[FeaturePyramid<T>; 2],
        context: &GlobalContext<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Forward<T>> {
        let states = self.decoder.forward(ctx, &pyramids[0], &pyramids[1], Some(&context.g))?;
        let last = states.last().expect("decoder has levels");
        let sf = self.heads.fuse_final(ctx, last, out_h, out_w)?;
        let branches = if self.heads.has_branch_heads() {
            Some([
                self.heads.branch_score(ctx, 0, &last.z[0], out_h, out_w)?,
                self.heads.branch_score(ctx, 1, &last.z[1], out_h, out_w)?,
            ])
        } else {
            None
        };
        Ok(Forward {
            outputs: SaliencyOutputs { sf, sg: context.s_g.clone(), branches },
            context: context.clone(),
            states,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<Forward<T>> {
        let pyramids = self.encode(ctx, rgb, thermal)?;
        let context = self.global_context(ctx, &pyramids)?;
        let s = rgb.shape();
        self.decode(ctx, &pyramids, &context, s.h, s.w)
    }

    /// Final saliency `N×1×H×W` in evaluation mode, nothing recorded.
    pub fn predict(&self, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.params, Mode::Eval);
        Ok(self.forward(&ctx, rgb, thermal)?.outputs.sf.into_tensor())
    }

    /// Initialise both encoder streams from one backbone's pretrained tensors,
    /// named as in the backbone alone (`features.0.weight`, `layer1.0.conv1.weight`, ...).
    /// Classifier tensors and batch counters are ignored; every backbone
    /// parameter must be present.
    pub fn load_backbone<'a, I>(&mut self, tensors: I) -> Result<usize>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    {
        let mut staged: Vec<(String, Tensor<T>)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (name, t) in tensors {
            if is_classifier_tensor(name) {
                continue;
            }
            seen.insert(name.to_string());
            for stream in [Stream::Rgb, Stream::Thermal] {
                staged.push((format!("encoder.{}.{name}", stream.name()), t.clone()));
            }
        }
        let prefix = "encoder.rgb.";
        let missing: Vec<String> = self
            .params
            .names_with_prefix(prefix)
            .map(|n| n[prefix.len()..].to_string())
            .filter(|n| !seen.contains(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingParameters(missing));
        }
        self.params.assign(staged.iter().map(|(n, t)| (n.as_str(), t.clone())))
    }
}

fn is_classifier_tensor(name: &str) -> bool {
    name.starts_with("fc.") || name.starts_with("classifier.") || name.ends_with("num_batches_tracked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn tiny_forward_shapes() {
        let net = SiamDecoder::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &net.params, Mode::Eval);
        let x = Tensor::full(Shape::new(1, 3, 64, 64), 0.5);
        let f = net.forward(&ctx, &x, &x).unwrap();
        assert_eq!(f.outputs.sf.shape(), Shape::new(1, 1, 64, 64));
        assert_eq!(f.outputs.sg.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(f.context.g.shape(), Shape::new(1, 32, 4, 4));
        assert_eq!(f.states[2].z_rgb().shape(), Shape::new(1, 16, 16, 16));
        let [s1, s2] = f.outputs.branches.unwrap();
        assert_eq!(s1.shape(), s2.shape());
    }

    #[test]
    fn resnet_plus_decodes_the_stem() {
        let cfg = ModelConfig { variant: Variant::ResNet50Plus, ..ModelConfig::tiny() };
        let net = SiamDecoder::<f32>::new(cfg, 0).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &net.params, Mode::Eval);
        let x = Tensor::full(Shape::new(1, 3, 64, 64), 0.2);
        let f = net.forward(&ctx, &x, &x).unwrap();
        let sides: Vec<usize> = f.states.iter().map(|s| s.z_rgb().shape().h).collect();
        assert_eq!(sides, [4, 8, 16, 32]);
        assert_eq!(f.outputs.sg.shape().h, 2);
        assert_eq!(f.outputs.sf.shape(), Shape::new(1, 1, 64, 64));
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.input_size = 60;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny();
        cfg.ablation.single_decoder = true;
        cfg.ablation.share_branch_weights = true;
        assert!(cfg.validate().is_err());
        assert!("resnet18".parse::<Variant>().is_err());
        assert_eq!("resnet50plus".parse::<Variant>().unwrap(), Variant::ResNet50Plus);
    }

    #[test]
    fn backbone_loading_fills_both_streams() {
        let mut net = SiamDecoder::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let src: Vec<(String, Tensor<f32>)> = net
            .params
            .iter()
            .filter(|(_, e)| e.name.starts_with("encoder.rgb."))
            .map(|(_, e)| (e.name["encoder.rgb.".len()..].to_string(), Tensor::full(e.value().shape(), 0.25)))
            .collect();
        let mut with_extra = src.clone();
        with_extra.push(("classifier.6.weight".into(), Tensor::zeros(Shape::scalar())));
        let n = net.load_backbone(with_extra.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(n, 2 * src.len());
        let id = net.params.find("encoder.thermal.features.28.weight").unwrap();
        assert!(net.params.get(id).data().iter().all(|&v| v == 0.25));

        let missing = net.load_backbone(src[1..].iter().map(|(n, t)| (n.as_str(), t))).unwrap_err();
        assert_eq!(missing, Error::MissingParameters(alloc::vec![src[0].0.clone()]));
    }
}
