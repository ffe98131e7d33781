//! Latent-space discriminator (LD) and image-conditioned patch depth
//! discriminator (DD).
//!
//! LD: three strided convolutions, each followed by a leaky ReLU, dropout after
//! the last two, then a linear head on the flattened features. The indoor
//! variant uses 3x3 kernels with stride 2 (7x7 -> 4x4 -> 2x2 -> 1x1); the
//! outdoor variant uses (4,7), (3,5), (3,5) kernels, also stride 2, so an 8x16
//! latent shrinks to 5x8 -> 3x4 -> 2x2.
//!
//! DD: a PatchGAN with four stride-2 4x4 convolutions and a 3x3 head producing
//! one score per patch. Its input is the image concatenated with the depth map
//! divided by the dataset maximum depth.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{
    declare_linear, linear, materialize, Activation, Conv2d, FeatureShape, Init,
    LayerGraph, LayerKind, Mode, ParamDecl,
};
use crate::params::ParamMap;
use crate::rng::RngHandle;

pub const DROPOUT_P: f64 = 0.6;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
/// Smallest input side for which the PatchGAN receptive field fits.
pub const MIN_DD_RESOLUTION: usize = 70;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LdVariant {
    Indoor,
    Outdoor,
}

impl LdVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LdVariant::Indoor => "indoor",
            LdVariant::Outdoor => "outdoor",
        }
    }

    pub fn kernels(&self) -> [(usize, usize); 3] {
        match self {
            LdVariant::Indoor => [(3, 3); 3],
            LdVariant::Outdoor => [(4, 7), (3, 5), (3, 5)],
        }
    }
}

impl fmt::Display for LdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(LdVariant::Indoor),
            "outdoor" => Ok(LdVariant::Outdoor),
            other => Err(Error::Config(format!(
                "unknown discriminator variant `{other}` (expected indoor or outdoor)"
            ))),
        }
    }
}

fn dims_of(params: &ParamMap) -> usize {
    params.num_elements()
}

/// Dropout randomness keyed by sample position: sample `j` of the `k`-th
/// scored sample overall draws from `base/k`. Scoring a batch whole or in
/// consecutive slices therefore yields identical masks.
#[derive(Debug)]
pub struct DropoutStream {
    base: RngHandle,
    next: usize,
}

impl DropoutStream {
    pub fn new(base: RngHandle) -> Self {
        Self { base, next: 0 }
    }

    fn take(&mut self, n: usize) -> Vec<RngHandle> {
        let rows = (self.next..self.next + n).map(|j| self.base.derive(j)).collect();
        self.next += n;
        rows
    }
}

/// Inverted dropout with one stream per sample (rows of the leading axis).
fn dropout_rows(x: &Tensor, p: f64, rows: &mut [RngHandle]) -> Result<Tensor> {
    let b = x.dim(0)?;
    let per = x.elem_count() / b.max(1);
    let keep = 1.0 - p;
    let scale = (1.0 / keep) as f32;
    let mut mask = Vec::with_capacity(x.elem_count());
    for rng in rows.iter_mut().take(b) {
        mask.extend((0..per).map(|_| if rng.bernoulli(keep) { scale } else { 0.0 }));
    }
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

#[derive(Clone)]
pub struct LatentDiscriminator {
    pub params: ParamMap,
    variant: LdVariant,
    latent: FeatureShape,
    convs: Vec<Conv2d>,
    flat_features: usize,
    pub dropout_p: f64,
}

impl fmt::Debug for LatentDiscriminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatentDiscriminator")
            .field("variant", &self.variant)
            .field("latent", &self.latent)
            .field("parameters", &dims_of(&self.params))
            .finish_non_exhaustive()
    }
}

pub fn build_latent_discriminator(
    variant: LdVariant,
    latent: FeatureShape,
    rng: &mut RngHandle,
) -> Result<LatentDiscriminator> {
    LatentDiscriminator::build(variant, latent, rng, DType::F32)
}

impl LatentDiscriminator {
    pub fn build(
        variant: LdVariant,
        latent: FeatureShape,
        rng: &mut RngHandle,
        dtype: DType,
    ) -> Result<Self> {
        let kernels = variant.kernels();
        let (kh, kw) = kernels
            .iter()
            .fold((0, 0), |(a, b), (h, w)| (a.max(*h), b.max(*w)));
        if latent.height < kh || latent.width < kw {
            return Err(Error::Config(format!(
                "{variant} latent discriminator needs a latent of at least {kh}x{kw}, got {}x{}",
                latent.height, latent.width
            )));
        }
        let mut convs = Vec::new();
        let mut cin = latent.channels;
        for (i, (kh, kw)) in kernels.iter().enumerate() {
            let cout = (latent.channels >> (i + 1)).max(8);
            convs.push(
                Conv2d::new(format!("ld.conv{}", i + 1), cin, cout, 3)
                    .rect(*kh, *kw)
                    .stride(2)
                    .with_bias()
                    .init(Init::Normal { std: INIT_STD }),
            );
            cin = cout;
        }
        let mut graph = LayerGraph::default();
        let mut s = latent;
        for c in &convs {
            s = c.trace(s, &mut graph)?;
        }
        let flat_features = s.numel();
        let mut decls = Vec::new();
        for c in &convs {
            c.declare(&mut decls);
        }
        declare_linear("ld.head", flat_features, 1, INIT_STD, &mut decls);
        let (params, _) = materialize(&decls, rng, dtype, &Device::Cpu)?;
        Ok(Self {
            params,
            variant,
            latent,
            convs,
            flat_features,
            dropout_p: DROPOUT_P,
        })
    }

    pub fn variant(&self) -> LdVariant {
        self.variant
    }

    pub fn latent_shape(&self) -> FeatureShape {
        self.latent
    }

    /// One score per sample, shape `B`. Train mode draws dropout masks from
    /// `dropout`; eval mode never touches it.
    pub fn score(&self, latents: &Tensor, mode: Mode, dropout: &mut DropoutStream) -> Result<Tensor> {
        let (b, c, h, w) = latents.dims4()?;
        if (c, h, w) != (self.latent.channels, self.latent.height, self.latent.width) {
            return Err(Error::Shape(format!(
                "latent discriminator built for {:?}, got {:?}",
                self.latent,
                latents.dims()
            )));
        }
        if b == 0 {
            return Ok(Tensor::zeros(0, latents.dtype(), latents.device())?);
        }
        let mut rows = match mode {
            Mode::Train if self.dropout_p > 0.0 => dropout.take(b),
            _ => Vec::new(),
        };
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let mut x = latents.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = act.apply(&conv.forward(&self.params, &x)?)?;
            if i > 0 && !rows.is_empty() {
                x = dropout_rows(&x, self.dropout_p, &mut rows)?;
            }
        }
        let x = x.reshape((b, self.flat_features))?;
        Ok(linear(&self.params, "ld.head", &x)?.reshape(b)?)
    }

    pub fn trace(&self, g: &mut LayerGraph) -> Result<()> {
        let mut s = self.latent;
        for (i, conv) in self.convs.iter().enumerate() {
            s = conv.trace(s, g)?;
            g.push(format!("{}.act", conv.name), LayerKind::Activation);
            if i > 0 {
                g.push(format!("{}.dropout", conv.name), LayerKind::Dropout);
            }
        }
        g.push("ld.flatten", LayerKind::Flatten);
        g.push(
            "ld.head",
            LayerKind::Linear {
                in_features: self.flat_features,
                out_features: 1,
            },
        );
        Ok(())
    }
}

#[derive(Clone)]
pub struct DepthDiscriminator {
    pub params: ParamMap,
    resolution: (usize, usize),
    max_depth: f32,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl fmt::Debug for DepthDiscriminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DepthDiscriminator")
            .field("resolution", &self.resolution)
            .field("max_depth", &self.max_depth)
            .field("parameters", &dims_of(&self.params))
            .finish_non_exhaustive()
    }
}

/// `base_width` is the channel count of the first convolution (64 for the
/// full-size networks, 8 for tiny variants).
pub fn build_depth_discriminator(
    resolution: (usize, usize),
    base_width: usize,
    max_depth: f32,
    rng: &mut RngHandle,
) -> Result<DepthDiscriminator> {
    DepthDiscriminator::build(resolution, base_width, max_depth, rng, DType::F32)
}

impl DepthDiscriminator {
    pub fn build(
        resolution: (usize, usize),
        base_width: usize,
        max_depth: f32,
        rng: &mut RngHandle,
        dtype: DType,
    ) -> Result<Self> {
        if resolution.0 < MIN_DD_RESOLUTION || resolution.1 < MIN_DD_RESOLUTION {
            return Err(Error::Config(format!(
                "depth discriminator needs at least {MIN_DD_RESOLUTION}x{MIN_DD_RESOLUTION} input, got {}x{}",
                resolution.0, resolution.1
            )));
        }
        if !(max_depth.is_finite() && max_depth > 0.0) || base_width == 0 {
            return Err(Error::Config(format!(
                "depth discriminator needs a positive max depth and width, got {max_depth} / {base_width}"
            )));
        }
        let mut convs = Vec::new();
        let mut cin = 4;
        for i in 0..4 {
            let cout = base_width << i;
            convs.push(
                Conv2d::new(format!("dd.conv{}", i + 1), cin, cout, 4)
                    .stride(2)
                    .padding(1, 1)
                    .with_bias()
                    .init(Init::Normal { std: INIT_STD }),
            );
            cin = cout;
        }
        let head = Conv2d::new("dd.head", cin, 1, 3)
            .with_bias()
            .init(Init::Normal { std: INIT_STD });
        let mut decls: Vec<ParamDecl> = Vec::new();
        for c in convs.iter().chain(std::iter::once(&head)) {
            c.declare(&mut decls);
        }
        let (params, _) = materialize(&decls, rng, dtype, &Device::Cpu)?;
        Ok(Self {
            params,
            resolution,
            max_depth,
            convs,
            head,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn max_depth(&self) -> f32 {
        self.max_depth
    }

    pub fn score_map_shape(&self) -> Result<(usize, usize)> {
        let mut g = LayerGraph::default();
        let s = self.trace(&mut g)?;
        Ok((s.height, s.width))
    }

    /// Scores an already concatenated `B x 4 x H x W` input.
    pub fn score_joint(&self, joint: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = joint.dims4()?;
        if c != 4 {
            return Err(Error::Shape(format!(
                "depth discriminator expects image and depth channels (4), got {c}"
            )));
        }
        if (h, w) != self.resolution {
            return Err(Error::Shape(format!(
                "depth discriminator built for {:?}, got {h}x{w}",
                self.resolution
            )));
        }
        if b == 0 {
            let (sh, sw) = self.score_map_shape()?;
            return Ok(Tensor::zeros((0, 1, sh, sw), joint.dtype(), joint.device())?);
        }
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let mut x = joint.clone();
        for conv in &self.convs {
            x = act.apply(&conv.forward(&self.params, &x)?)?;
        }
        self.head.forward(&self.params, &x)
    }

    /// Score maps `B x 1 x h x w` for images `B x 3 x H x W` and metric
    /// depths `B x 1 x H x W`.
    pub fn score(&self, images: &Tensor, depths: &Tensor) -> Result<Tensor> {
        let (bi, ci, hi, wi) = images.dims4()?;
        let (bd, cd, hd, wd) = depths.dims4()?;
        if ci != 3 || cd != 1 || bi != bd || (hi, wi) != (hd, wd) {
            return Err(Error::Shape(format!(
                "depth discriminator needs matching B x 3 x H x W images and B x 1 x H x W depths, got {:?} and {:?}",
                images.dims(),
                depths.dims()
            )));
        }
        let normalized = (depths / self.max_depth as f64)?;
        let joint = Tensor::cat(&[images, &normalized], 1)?;
        self.score_joint(&joint)
    }

    pub fn trace(&self, g: &mut LayerGraph) -> Result<FeatureShape> {
        let mut s = FeatureShape::new(4, self.resolution.0, self.resolution.1);
        for conv in &self.convs {
            s = conv.trace(s, g)?;
            g.push(format!("{}.act", conv.name), LayerKind::Activation);
        }
        self.head.trace(s, g)
    }
}
