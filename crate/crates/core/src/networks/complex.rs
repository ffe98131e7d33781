//! ResNet-50 encoder with an up-projection decoder.
//!
//! Stage names follow the original ResNet tables: `encoder.conv1` is the 7x7
//! stem, `encoder.conv2` .. `encoder.conv5` are the bottleneck stages
//! ([3, 4, 6, 3] blocks). The decoder reduces the 2048-channel latent with a
//! 1x1 convolution and then applies five up-projection blocks, each doubling
//! resolution and halving channels, before a 3x3 softplus head.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{
    max_pool2d, unpool2x, Activation, Conv2d, ConvBnAct, FeatureShape, LayerGraph, LayerKind, Mode, ParamDecl,
};
use crate::params::Weights;

use super::LatentCode;

const STAGES: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];

pub const ADAPTED_STAGE: &str = "encoder.conv5.";

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: ConvBnAct,
    conv2: ConvBnAct,
    conv3: ConvBnAct,
    downsample: Option<ConvBnAct>,
}

impl Bottleneck {
    fn new(name: &str, cin: usize, planes: usize, stride: usize) -> Self {
        let cout = planes * 4;
        let downsample = (stride != 1 || cin != cout).then(|| {
            ConvBnAct::standard(&format!("{name}.downsample"), |n| {
                Conv2d::new(n, cin, cout, 1).stride(stride)
            })
            .without_act()
        });
        Self {
            conv1: ConvBnAct::standard(&format!("{name}.conv1"), |n| Conv2d::new(n, cin, planes, 1)),
            conv2: ConvBnAct::standard(&format!("{name}.conv2"), |n| {
                Conv2d::new(n, planes, planes, 3).stride(stride)
            }),
            conv3: ConvBnAct::standard(&format!("{name}.conv3"), |n| Conv2d::new(n, planes, cout, 1))
                .without_act(),
            downsample,
        }
    }

    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.conv1.declare(out);
        self.conv2.declare(out);
        self.conv3.declare(out);
        if let Some(d) = &self.downsample {
            d.declare(out);
        }
    }

    fn forward(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv1.forward(w, x, mode)?;
        let y = self.conv2.forward(w, &y, mode)?;
        let y = self.conv3.forward(w, &y, mode)?;
        let identity = match &self.downsample {
            Some(d) => d.forward(w, x, mode)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }

    fn trace(&self, input: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        let s = self.conv1.trace(input, g)?;
        let s = self.conv2.trace(s, g)?;
        let s = self.conv3.trace(s, g)?;
        if let Some(d) = &self.downsample {
            d.trace(input, g)?;
        }
        g.push(format!("{}.residual", self.conv1.conv.name), LayerKind::Add);
        g.push(format!("{}.relu", self.conv3.conv.name), LayerKind::Activation);
        Ok(s)
    }
}

#[derive(Clone, Debug)]
struct UpProjection {
    name: String,
    branch1: ConvBnAct,
    branch2: ConvBnAct,
    projection: ConvBnAct,
}

impl UpProjection {
    fn new(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            name: name.to_owned(),
            branch1: ConvBnAct::standard(&format!("{name}.conv1"), |n| Conv2d::new(n, cin, cout, 5)),
            branch2: ConvBnAct::standard(&format!("{name}.conv2"), |n| Conv2d::new(n, cout, cout, 3))
                .without_act(),
            projection: ConvBnAct::standard(&format!("{name}.proj"), |n| Conv2d::new(n, cin, cout, 5))
                .without_act(),
        }
    }

    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.branch1.declare(out);
        self.branch2.declare(out);
        self.projection.declare(out);
    }

    fn forward(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let u = unpool2x(x)?;
        let main = self.branch2.forward(w, &self.branch1.forward(w, &u, mode)?, mode)?;
        let skip = self.projection.forward(w, &u, mode)?;
        Ok((main + skip)?.relu()?)
    }

    fn trace(&self, input: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        g.push(format!("{}.unpool", self.name), LayerKind::Upsample);
        let up = FeatureShape::new(input.channels, input.height * 2, input.width * 2);
        let s = self.branch1.trace(up, g)?;
        let s = self.branch2.trace(s, g)?;
        self.projection.trace(up, g)?;
        g.push(format!("{}.sum", self.name), LayerKind::Add);
        g.push(format!("{}.relu", self.name), LayerKind::Activation);
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct Complex {
    stem: ConvBnAct,
    stages: Vec<Vec<Bottleneck>>,
    reduce: ConvBnAct,
    ups: Vec<UpProjection>,
    head: Conv2d,
    latent_channels: usize,
}

impl Complex {
    pub fn new(width_divisor: usize) -> Self {
        let ch = |c: usize| (c / width_divisor).max(1);
        let stem = ConvBnAct::standard("encoder.conv1", |n| Conv2d::new(n, 3, ch(64), 7).stride(2));
        let mut cin = ch(64);
        let mut stages = Vec::new();
        for (si, (planes, blocks, stride)) in STAGES.iter().enumerate() {
            let mut stage = Vec::new();
            for b in 0..*blocks {
                let name = format!("encoder.conv{}.{b}", si + 2);
                let s = if b == 0 { *stride } else { 1 };
                stage.push(Bottleneck::new(&name, cin, ch(*planes), s));
                cin = ch(*planes) * 4;
            }
            stages.push(stage);
        }
        let latent_channels = cin;
        let mut c = ch(1024);
        let reduce =
            ConvBnAct::standard("decoder.conv", |n| Conv2d::new(n, latent_channels, c, 1)).without_act();
        let mut ups = Vec::new();
        for i in 0..5 {
            ups.push(UpProjection::new(&format!("decoder.up{}", i + 1), c, (c / 2).max(1)));
            c = (c / 2).max(1);
        }
        let head = Conv2d::new("decoder.head", c, 1, 3).with_bias();
        Self {
            stem,
            stages,
            reduce,
            ups,
            head,
            latent_channels,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn declare_encoder(&self, out: &mut Vec<ParamDecl>) {
        self.stem.declare(out);
        for block in self.stages.iter().flatten() {
            block.declare(out);
        }
    }

    pub fn declare_decoder(&self, out: &mut Vec<ParamDecl>) {
        self.reduce.declare(out);
        for up in &self.ups {
            up.declare(out);
        }
        self.head.declare(out);
    }

    pub fn encode(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<LatentCode> {
        let h = self.stem.forward(w, x, mode)?;
        // Inputs are post-ReLU, so zero padding is equivalent to -inf padding.
        let mut h = max_pool2d(&h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?, 3, 2)?;
        for block in self.stages.iter().flatten() {
            h = block.forward(w, &h, mode)?;
        }
        Ok(LatentCode {
            values: h,
            skips: Vec::new(),
        })
    }

    pub fn decode(&self, w: &dyn Weights, latent: &LatentCode, mode: Mode) -> Result<Tensor> {
        let mut h = self.reduce.forward(w, &latent.values, mode)?;
        for up in &self.ups {
            h = up.forward(w, &h, mode)?;
        }
        Activation::Softplus.apply(&self.head.forward(w, &h)?)
    }

    pub fn trace_encoder(&self, input: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        let s = self.stem.trace(input, g)?;
        g.push("encoder.maxpool", LayerKind::Pool);
        let mut s = FeatureShape::new(s.channels, (s.height + 2 - 3) / 2 + 1, (s.width + 2 - 3) / 2 + 1);
        for block in self.stages.iter().flatten() {
            s = block.trace(s, g)?;
        }
        Ok(s)
    }

    pub fn trace_decoder(&self, latent: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        let mut s = self.reduce.trace(latent, g)?;
        for up in &self.ups {
            s = up.trace(s, g)?;
        }
        let out = self.head.trace(s, g)?;
        g.push("decoder.head.softplus", LayerKind::Activation);
        Ok(out)
    }
}
