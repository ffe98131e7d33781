//! Layer building blocks shared by the depth networks and discriminators.
//!
//! A block is a plain description (names, channel counts, kernel geometry).
//! The same description serves three purposes: declaring parameters,
//! running the forward pass against any [`Weights`] source, and tracing an
//! analytic layer graph for MAC accounting without touching any tensor data.

mod depthwise;
mod im2col;
mod maxpool;

use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::params::{ParamMap, Weights};
use crate::rng::RngHandle;

pub(crate) use depthwise::depthwise_conv2d;
pub(crate) use maxpool::max_pool2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers; running statistics updated.
    Train,
    /// Running statistics; no buffer writes.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    Normal { std: f64 },
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

/// Allocates declared tensors in declaration order. Trainable entries go to
/// the first map, buffers to the second.
pub fn materialize(
    decls: &[ParamDecl],
    rng: &mut RngHandle,
    dtype: DType,
    device: &Device,
) -> Result<(ParamMap, ParamMap)> {
    let mut params = ParamMap::new();
    let mut buffers = ParamMap::new();
    for decl in decls {
        let n: usize = decl.shape.iter().product();
        // Values are drawn in f32 so f32 and f64 builds hold identical weights.
        let values: Vec<f32> = match decl.init {
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| (rng.normal() * std) as f32).collect()
            }
            Init::Normal { std } => (0..n).map(|_| (rng.normal() * std) as f32).collect(),
            Init::Constant(c) => vec![c as f32; n],
        };
        let t = Tensor::from_vec(values, decl.shape.as_slice(), device)?.to_dtype(dtype)?;
        let target = if decl.trainable { &mut params } else { &mut buffers };
        if target.contains(&decl.name) {
            return Err(Error::Config(format!("duplicate parameter `{}`", decl.name)));
        }
        target.insert(decl.name.clone(), Var::from_tensor(&t)?);
    }
    Ok((params, buffers))
}

/// Channels x height x width of a single sample's feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        groups: usize,
        output: (usize, usize),
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm,
    Activation,
    Upsample,
    Add,
    Pool,
    Dropout,
    Flatten,
    /// A layer the accountant has no formula for.
    Other(String),
}

impl LayerKind {
    pub fn label(&self) -> &str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Activation => "activation",
            LayerKind::Upsample => "upsample",
            LayerKind::Add => "add",
            LayerKind::Pool => "pool",
            LayerKind::Dropout => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::Other(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
}

/// Ordered layer records produced by tracing a network at a resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGraph {
    pub layers: Vec<LayerRecord>,
}

impl LayerGraph {
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind) {
        self.layers.push(LayerRecord {
            name: name.into(),
            kind,
        });
    }

    pub fn extend(&mut self, other: LayerGraph) {
        self.layers.extend(other.layers);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    /// `ln(1 + e^x)`, the nonnegative depth head.
    Softplus,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::LeakyRelu(slope) => x.maximum(&(x * *slope)?)?,
            Activation::Softplus => softplus(x)?,
        })
    }
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + ln(1 + e^{-|x|}) avoids overflow for large |x|.
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
    pub init: Option<Init>,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: (kernel / 2, kernel / 2),
            groups: 1,
            bias: false,
            init: None,
        }
    }

    pub fn rect(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self.padding = (kh / 2, kw / 2);
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.in_channels;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = Some(init);
        self
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        let per_group = self.in_channels / self.groups;
        let fan_in = per_group * self.kernel.0 * self.kernel.1;
        out.push(ParamDecl {
            name: self.weight_name(),
            shape: vec![self.out_channels, per_group, self.kernel.0, self.kernel.1],
            init: self.init.unwrap_or(Init::Kaiming { fan_in }),
            trainable: true,
        });
        if self.bias {
            out.push(ParamDecl {
                name: self.bias_name(),
                shape: vec![self.out_channels],
                init: Init::Constant(0.0),
                trainable: true,
            });
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "`{}`: kernel {kh}x{kw} larger than padded input {h}x{w}",
                self.name
            )));
        }
        Ok(((h + 2 * ph - kh) / self.stride + 1, (w + 2 * pw - kw) / self.stride + 1))
    }

    pub fn trace(&self, input: FeatureShape, graph: &mut LayerGraph) -> Result<FeatureShape> {
        self.check_channels(input.channels)?;
        let (h, w) = self.output_hw(input.height, input.width)?;
        graph.push(
            &self.name,
            LayerKind::Conv {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                kernel: self.kernel,
                groups: self.groups,
                output: (h, w),
            },
        );
        Ok(FeatureShape::new(self.out_channels, h, w))
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::Shape(format!(
                "`{}` expects {} input channels, got {channels}",
                self.name, self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, w: &dyn Weights, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        self.check_channels(c)?;
        let kernel = w.weight(&self.weight_name())?;
        let (ph, pw) = self.padding;
        let y = if self.groups == 1 {
            im2col::conv2d(x, &kernel, self.stride, (ph, pw))?
        } else if self.groups == self.in_channels && self.out_channels == self.in_channels {
            depthwise_conv2d(x, &kernel, self.stride, self.padding)?
        } else {
            return Err(Error::Config(format!(
                "`{}`: only dense or depthwise convolutions are supported",
                self.name
            )));
        };
        if self.bias {
            let b = w.weight(&self.bias_name())?.reshape((1, self.out_channels, 1, 1))?;
            Ok(y.broadcast_add(&b)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn key(&self, field: &str) -> String {
        format!("{}.{}", self.name, field)
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        let c = vec![self.channels];
        for (field, init, trainable) in [
            ("weight", 1.0, true),
            ("bias", 0.0, true),
            ("running_mean", 0.0, false),
            ("running_var", 1.0, false),
        ] {
            out.push(ParamDecl {
                name: self.key(field),
                shape: c.clone(),
                init: Init::Constant(init),
                trainable,
            });
        }
    }

    pub fn forward(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, wd) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "`{}` expects {} channels, got {c}",
                self.name, self.channels
            )));
        }
        let shape = (1, c, 1, 1);
        let gamma = w.weight(&self.key("weight"))?.reshape(shape)?;
        let beta = w.weight(&self.key("bias"))?.reshape(shape)?;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered
                    .sqr()?
                    .mean_keepdim(0)?
                    .mean_keepdim(2)?
                    .mean_keepdim(3)?;
                let count = n * h * wd;
                if count > 1 {
                    let unbiased = (var.detach() * (count as f64 / (count - 1) as f64))?;
                    let m = self.momentum;
                    let rm = w.weight(&self.key("running_mean"))?;
                    let rv = w.weight(&self.key("running_var"))?;
                    let rm_new = ((rm * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                    let rv_new = ((rv * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                    w.update_buffer(&self.key("running_mean"), &rm_new)?;
                    w.update_buffer(&self.key("running_var"), &rv_new)?;
                }
                (mean, var)
            }
            Mode::Eval => (
                w.weight(&self.key("running_mean"))?.reshape(shape)?,
                w.weight(&self.key("running_var"))?.reshape(shape)?,
            ),
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let normed = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Convolution, optional batch norm, optional activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub act: Option<Activation>,
}

impl ConvBnAct {
    /// `{prefix}.conv` + `{prefix}.bn` + ReLU.
    pub fn standard(prefix: &str, conv: impl FnOnce(String) -> Conv2d) -> Self {
        let conv = conv(format!("{prefix}.conv"));
        let bn = BatchNorm2d::new(format!("{prefix}.bn"), conv.out_channels);
        Self {
            conv,
            bn: Some(bn),
            act: Some(Activation::Relu),
        }
    }

    pub fn without_act(mut self) -> Self {
        self.act = None;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.conv.declare(out);
        if let Some(bn) = &self.bn {
            bn.declare(out);
        }
    }

    pub fn forward(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.conv.forward(w, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(w, &y, mode)?;
        }
        if let Some(act) = &self.act {
            y = act.apply(&y)?;
        }
        Ok(y)
    }

    pub fn trace(&self, input: FeatureShape, graph: &mut LayerGraph) -> Result<FeatureShape> {
        let out = self.conv.trace(input, graph)?;
        if let Some(bn) = &self.bn {
            graph.push(&bn.name, LayerKind::BatchNorm);
        }
        if self.act.is_some() {
            graph.push(format!("{}.act", self.conv.name), LayerKind::Activation);
        }
        Ok(out)
    }
}

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1` convolution,
/// each with batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparable {
    pub name: String,
    pub dw: ConvBnAct,
    pub pw: ConvBnAct,
}

impl DepthwiseSeparable {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let name = name.into();
        let dw = ConvBnAct::standard(&format!("{name}.dw"), |n| {
            Conv2d::new(n, cin, cin, kernel).stride(stride).depthwise()
        });
        let pw = ConvBnAct::standard(&format!("{name}.pw"), |n| Conv2d::new(n, cin, cout, 1));
        Self { name, dw, pw }
    }

    pub fn out_channels(&self) -> usize {
        self.pw.out_channels()
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.dw.declare(out);
        self.pw.declare(out);
    }

    pub fn forward(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.dw.forward(w, x, mode)?;
        self.pw.forward(w, &y, mode)
    }

    pub fn trace(&self, input: FeatureShape, graph: &mut LayerGraph) -> Result<FeatureShape> {
        let mid = self.dw.trace(input, graph)?;
        self.pw.trace(mid, graph)
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// 2x unpooling: each value goes to the top-left of its 2x2 cell, the rest is zero.
pub fn unpool2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .pad_with_zeros(5, 0, 1)?
        .pad_with_zeros(3, 0, 1)?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Inverted dropout with masks drawn from `rng` in row-major order, so a
/// batch processed whole or in consecutive slices sees the same masks.
pub fn dropout(x: &Tensor, p: f64, rng: &mut RngHandle) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let scale = (1.0 / keep) as f32;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.bernoulli(keep) { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// `y = x W^T + b` for `x` of shape `B x in`.
pub fn linear(w: &dyn Weights, name: &str, x: &Tensor) -> Result<Tensor> {
    let weight = w.weight(&format!("{name}.weight"))?;
    let bias = w.weight(&format!("{name}.bias"))?;
    Ok(x.matmul(&weight.t()?)?.broadcast_add(&bias)?)
}

pub fn declare_linear(name: &str, input: usize, output: usize, std: f64, out: &mut Vec<ParamDecl>) {
    out.push(ParamDecl {
        name: format!("{name}.weight"),
        shape: vec![output, input],
        init: Init::Normal { std },
        trainable: true,
    });
    out.push(ParamDecl {
        name: format!("{name}.bias"),
        shape: vec![output],
        init: Init::Constant(0.0),
        trainable: true,
    });
}

/// Mean over every axis except the first, giving one value per sample.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}
