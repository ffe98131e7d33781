//! MobileNet encoder with a depthwise-separable nearest-neighbour decoder.
//!
//! Encoder: a stride-2 stem followed by 13 depthwise-separable layers
//! (`encoder.layer1` .. `encoder.layer13`), reaching stride 32 with 1024
//! channels. Decoder: five stages of 5x5 depthwise + pointwise convolution,
//! each followed by 2x nearest upsampling, then a 1x1 head with softplus.
//! With skip connections, encoder features at strides 16, 8 and 4 are added to
//! the decoder right after the matching upsampling.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{
    upsample_nearest2x, Activation, Conv2d, ConvBnAct, DepthwiseSeparable, FeatureShape,
    LayerGraph, LayerKind, Mode, ParamDecl,
};
use crate::params::Weights;

use super::LatentCode;

/// (output channels, stride) of encoder layers 1..=13.
const ENCODER_LAYERS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

/// Encoder layers whose outputs feed the decoder, ordered by stride 4, 8, 16.
const SKIP_SOURCES: [usize; 3] = [3, 5, 11];

/// Layers adapted on the target domain: the last four encoder layers.
pub const ADAPTED_LAYERS: [usize; 4] = [10, 11, 12, 13];

#[derive(Clone, Debug)]
pub struct Lightweight {
    stem: ConvBnAct,
    layers: Vec<DepthwiseSeparable>,
    stages: Vec<DepthwiseSeparable>,
    head: Conv2d,
    skip_connections: bool,
}

impl Lightweight {
    pub fn new(width_divisor: usize, skip_connections: bool) -> Self {
        let ch = |c: usize| (c / width_divisor).max(1);
        let stem = ConvBnAct::standard("encoder.layer0", |n| Conv2d::new(n, 3, ch(32), 3).stride(2));
        let mut cin = ch(32);
        let mut layers = Vec::with_capacity(ENCODER_LAYERS.len());
        for (i, (cout, stride)) in ENCODER_LAYERS.iter().enumerate() {
            layers.push(DepthwiseSeparable::new(
                format!("encoder.layer{}", i + 1),
                cin,
                ch(*cout),
                3,
                *stride,
            ));
            cin = ch(*cout);
        }
        let mut stages = Vec::with_capacity(5);
        for (i, cout) in [512, 256, 128, 64, 32].iter().enumerate() {
            stages.push(DepthwiseSeparable::new(
                format!("decoder.stage{}", i + 1),
                cin,
                ch(*cout),
                5,
                1,
            ));
            cin = ch(*cout);
        }
        let head = Conv2d::new("decoder.head", cin, 1, 1).with_bias();
        Self {
            stem,
            layers,
            stages,
            head,
            skip_connections,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels()).unwrap_or(0)
    }

    pub fn adaptable_prefixes() -> Vec<String> {
        ADAPTED_LAYERS
            .iter()
            .map(|i| format!("encoder.layer{i}."))
            .collect()
    }

    pub fn declare_encoder(&self, out: &mut Vec<ParamDecl>) {
        self.stem.declare(out);
        for l in &self.layers {
            l.declare(out);
        }
    }

    pub fn declare_decoder(&self, out: &mut Vec<ParamDecl>) {
        for s in &self.stages {
            s.declare(out);
        }
        self.head.declare(out);
    }

    pub fn encode(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<LatentCode> {
        let mut h = self.stem.forward(w, x, mode)?;
        let mut skips = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(w, &h, mode)?;
            if self.skip_connections && SKIP_SOURCES.contains(&(i + 1)) {
                skips.push(h.clone());
            }
        }
        Ok(LatentCode { values: h, skips })
    }

    pub fn decode(&self, w: &dyn Weights, latent: &LatentCode, mode: Mode) -> Result<Tensor> {
        let mut h = latent.values.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            h = upsample_nearest2x(&stage.forward(w, &h, mode)?)?;
            // Stage 1 lands on stride 16, stage 2 on 8, stage 3 on 4.
            if self.skip_connections && i < 3 {
                if let Some(skip) = latent.skips.get(2 - i) {
                    h = (h + skip)?;
                }
            }
        }
        Activation::Softplus.apply(&self.head.forward(w, &h)?)
    }

    pub fn trace_encoder(&self, input: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        let mut s = self.stem.trace(input, g)?;
        for l in &self.layers {
            s = l.trace(s, g)?;
        }
        Ok(s)
    }

    pub fn trace_decoder(&self, latent: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        let mut s = latent;
        for (i, stage) in self.stages.iter().enumerate() {
            s = stage.trace(s, g)?;
            g.push(format!("{}.upsample", stage.name), LayerKind::Upsample);
            s = FeatureShape::new(s.channels, s.height * 2, s.width * 2);
            if self.skip_connections && i < 3 {
                g.push(format!("{}.skip", stage.name), LayerKind::Add);
            }
        }
        let out = self.head.trace(s, g)?;
        g.push("decoder.head.softplus", LayerKind::Activation);
        Ok(out)
    }
}
