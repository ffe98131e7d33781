//! Encoder-decoder depth networks.
//!
//! A [`DepthNetwork`] keeps encoder and decoder parameters in separate maps so
//! the adaptation engine can freeze the decoder, snapshot the source encoder
//! and update only the adaptable encoder subset.

mod complex;
mod lightweight;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{materialize, FeatureShape, LayerGraph, Mode, ParamDecl};
use crate::params::{ParamMap, Weights};
use crate::rng::RngHandle;
use crate::types::{images_to_tensor, tensor_to_depths, DepthMap, ImageSample};

pub use complex::{Complex, ADAPTED_STAGE};
pub use lightweight::{Lightweight, ADAPTED_LAYERS};

/// Spatial reduction between the input image and the latent code.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchitectureId {
    Lightweight,
    LightweightTiny,
    Complex,
    ComplexTiny,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 4] = [
        ArchitectureId::Lightweight,
        ArchitectureId::LightweightTiny,
        ArchitectureId::Complex,
        ArchitectureId::ComplexTiny,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureId::Lightweight => "lightweight",
            ArchitectureId::LightweightTiny => "lightweight-tiny",
            ArchitectureId::Complex => "complex",
            ArchitectureId::ComplexTiny => "complex-tiny",
        }
    }

    /// Tiny variants divide every channel count by 8.
    pub fn width_divisor(&self) -> usize {
        match self {
            ArchitectureId::Lightweight | ArchitectureId::Complex => 1,
            ArchitectureId::LightweightTiny | ArchitectureId::ComplexTiny => 8,
        }
    }

    pub fn is_lightweight(&self) -> bool {
        matches!(self, ArchitectureId::Lightweight | ArchitectureId::LightweightTiny)
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchitectureId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture `{s}` (expected one of lightweight, lightweight-tiny, complex, complex-tiny)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    /// Softplus head; predictions are always nonnegative.
    Nonneg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub id: ArchitectureId,
    /// (height, width)
    pub input_resolution: (usize, usize),
    pub skip_connections: bool,
    pub output_activation: OutputActivation,
}

impl ArchitectureSpec {
    pub fn new(id: ArchitectureId, height: usize, width: usize) -> Self {
        Self {
            id,
            input_resolution: (height, width),
            skip_connections: id.is_lightweight(),
            output_activation: OutputActivation::Nonneg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_resolution;
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} unsupported by `{}`: both sides must be positive multiples of {ENCODER_STRIDE}",
                self.id
            )));
        }
        if self.skip_connections && !self.id.is_lightweight() {
            return Err(Error::Config(format!(
                "`{}` has no skip connections",
                self.id
            )));
        }
        Ok(())
    }

    pub fn latent_resolution(&self) -> (usize, usize) {
        (
            self.input_resolution.0 / ENCODER_STRIDE,
            self.input_resolution.1 / ENCODER_STRIDE,
        )
    }
}

/// Encoder output for a batch: the bottleneck features seen by the latent
/// discriminator, plus the intermediate features the lightweight decoder
/// merges through skip connections (empty for the complex network).
#[derive(Clone, Debug)]
pub struct LatentCode {
    pub values: Tensor,
    pub skips: Vec<Tensor>,
}

impl LatentCode {
    pub fn batch_size(&self) -> usize {
        self.values.dims().first().copied().unwrap_or(0)
    }

    pub fn detach(&self) -> LatentCode {
        LatentCode {
            values: self.values.detach(),
            skips: self.skips.iter().map(Tensor::detach).collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum Architecture {
    Lightweight(Lightweight),
    Complex(Complex),
}

impl Architecture {
    fn new(spec: &ArchitectureSpec) -> Self {
        let div = spec.id.width_divisor();
        if spec.id.is_lightweight() {
            Architecture::Lightweight(Lightweight::new(div, spec.skip_connections))
        } else {
            Architecture::Complex(Complex::new(div))
        }
    }

    fn latent_channels(&self) -> usize {
        match self {
            Architecture::Lightweight(a) => a.latent_channels(),
            Architecture::Complex(a) => a.latent_channels(),
        }
    }

    fn declare_encoder(&self, out: &mut Vec<ParamDecl>) {
        match self {
            Architecture::Lightweight(a) => a.declare_encoder(out),
            Architecture::Complex(a) => a.declare_encoder(out),
        }
    }

    fn declare_decoder(&self, out: &mut Vec<ParamDecl>) {
        match self {
            Architecture::Lightweight(a) => a.declare_decoder(out),
            Architecture::Complex(a) => a.declare_decoder(out),
        }
    }

    fn encode(&self, w: &dyn Weights, x: &Tensor, mode: Mode) -> Result<LatentCode> {
        match self {
            Architecture::Lightweight(a) => a.encode(w, x, mode),
            Architecture::Complex(a) => a.encode(w, x, mode),
        }
    }

    fn decode(&self, w: &dyn Weights, z: &LatentCode, mode: Mode) -> Result<Tensor> {
        match self {
            Architecture::Lightweight(a) => a.decode(w, z, mode),
            Architecture::Complex(a) => a.decode(w, z, mode),
        }
    }

    fn trace_encoder(&self, input: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        match self {
            Architecture::Lightweight(a) => a.trace_encoder(input, g),
            Architecture::Complex(a) => a.trace_encoder(input, g),
        }
    }

    fn trace_decoder(&self, latent: FeatureShape, g: &mut LayerGraph) -> Result<FeatureShape> {
        match self {
            Architecture::Lightweight(a) => a.trace_decoder(latent, g),
            Architecture::Complex(a) => a.trace_decoder(latent, g),
        }
    }

    fn adaptable_prefixes(&self) -> Vec<String> {
        match self {
            Architecture::Lightweight(_) => Lightweight::adaptable_prefixes(),
            Architecture::Complex(_) => vec![ADAPTED_STAGE.to_owned()],
        }
    }
}

/// `f(x) = decoder(encoder(x))` with explicit encoder/decoder parameter maps.
#[derive(Clone)]
pub struct DepthNetwork {
    spec: ArchitectureSpec,
    arch: Architecture,
    pub encoder_params: ParamMap,
    pub decoder_params: ParamMap,
    pub encoder_buffers: ParamMap,
    pub decoder_buffers: ParamMap,
    adaptable_names: Vec<String>,
    dtype: DType,
    device: Device,
}

impl fmt::Debug for DepthNetwork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DepthNetwork")
            .field("spec", &self.spec)
            .field("parameters", &self.num_parameters())
            .field("dtype", &self.dtype)
            .finish_non_exhaustive()
    }
}

pub fn build_depth_network(spec: ArchitectureSpec, rng: &mut RngHandle) -> Result<DepthNetwork> {
    DepthNetwork::build(spec, rng, DType::F32)
}

impl DepthNetwork {
    pub fn build(spec: ArchitectureSpec, rng: &mut RngHandle, dtype: DType) -> Result<DepthNetwork> {
        spec.validate()?;
        let arch = Architecture::new(&spec);
        let device = Device::Cpu;
        let mut enc = Vec::new();
        arch.declare_encoder(&mut enc);
        let mut dec = Vec::new();
        arch.declare_decoder(&mut dec);
        let (encoder_params, encoder_buffers) = materialize(&enc, rng, dtype, &device)?;
        let (decoder_params, decoder_buffers) = materialize(&dec, rng, dtype, &device)?;
        let prefixes = arch.adaptable_prefixes();
        let adaptable_names = encoder_params
            .names()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
            .map(str::to_owned)
            .collect();
        Ok(DepthNetwork {
            spec,
            arch,
            encoder_params,
            decoder_params,
            encoder_buffers,
            decoder_buffers,
            adaptable_names,
            dtype,
            device,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    /// An independent copy: updates to either network never reach the other.
    pub fn deep_copy(&self) -> Result<DepthNetwork> {
        Ok(DepthNetwork {
            encoder_params: self.encoder_params.deep_copy()?,
            decoder_params: self.decoder_params.deep_copy()?,
            encoder_buffers: self.encoder_buffers.deep_copy()?,
            decoder_buffers: self.decoder_buffers.deep_copy()?,
            ..self.clone()
        })
    }

    /// Rebuilds a network from a checkpoint written by [`DepthNetwork::state`].
    pub fn from_state(spec: ArchitectureSpec, state: &BTreeMap<String, Tensor>, dtype: DType) -> Result<DepthNetwork> {
        let net = DepthNetwork::build(spec, &mut crate::rng::seeded_rng(0, "template"), dtype)?;
        net.load_state(state)?;
        Ok(net)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn adaptable_names(&self) -> &[String] {
        &self.adaptable_names
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder_params.num_elements() + self.decoder_params.num_elements()
    }

    pub fn latent_shape(&self) -> FeatureShape {
        let (h, w) = self.spec.latent_resolution();
        FeatureShape::new(self.arch.latent_channels(), h, w)
    }

    /// The adaptable encoder parameters, sharing storage with `self`.
    pub fn adaptable_parameters(&self) -> ParamMap {
        self.encoder_params
            .subset(self.adaptable_names.iter().map(String::as_str))
            .expect("adaptable names are encoder parameters")
    }

    /// Encoder parameters outside the adaptable subset.
    pub fn frozen_encoder_parameters(&self) -> ParamMap {
        let names: Vec<&str> = self
            .encoder_params
            .names()
            .filter(|n| !self.adaptable_names.iter().any(|a| a == n))
            .collect();
        self.encoder_params.subset(names).expect("encoder names")
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || (h, w) != self.spec.input_resolution {
            return Err(Error::Shape(format!(
                "`{}` expects B x 3 x {} x {} input, got {:?}",
                self.spec.id,
                self.spec.input_resolution.0,
                self.spec.input_resolution.1,
                x.dims()
            )));
        }
        Ok(b)
    }

    fn empty_latent(&self) -> Result<LatentCode> {
        let s = self.latent_shape();
        Ok(LatentCode {
            values: Tensor::zeros((0, s.channels, s.height, s.width), self.dtype, &self.device)?,
            skips: Vec::new(),
        })
    }

    pub fn encode(&self, images: &Tensor, mode: Mode) -> Result<LatentCode> {
        if self.check_input(images)? == 0 {
            return self.empty_latent();
        }
        self.arch.encode(self, images, mode)
    }

    pub fn decode(&self, latent: &LatentCode, mode: Mode) -> Result<Tensor> {
        let expected = self.latent_shape();
        let dims = latent.values.dims();
        if dims.len() != 4 || dims[1..] != [expected.channels, expected.height, expected.width] {
            return Err(Error::Shape(format!(
                "latent {:?} does not match {:?}",
                dims, expected
            )));
        }
        if dims[0] == 0 {
            let (h, w) = self.spec.input_resolution;
            return Ok(Tensor::zeros((0, 1, h, w), self.dtype, &self.device)?);
        }
        self.arch.decode(self, latent, mode)
    }

    pub fn forward_depth(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let z = self.encode(images, mode)?;
        self.decode(&z, mode)
    }

    /// Eval-mode prediction on image samples.
    pub fn predict(&self, images: &[&ImageSample]) -> Result<Vec<DepthMap>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = images_to_tensor(images, &self.device, self.dtype)?;
        tensor_to_depths(&self.forward_depth(&x, Mode::Eval)?)
    }

    pub fn snapshot_frozen_encoder(&self) -> Result<FrozenEncoder> {
        let mut weights = self.encoder_params.to_tensors()?;
        weights.extend(self.encoder_buffers.to_tensors()?);
        Ok(FrozenEncoder {
            spec: self.spec,
            arch: self.arch.clone(),
            weights,
            latent: self.latent_shape(),
        })
    }

    pub fn trace_encoder(&self, resolution: (usize, usize)) -> Result<(LayerGraph, FeatureShape)> {
        let mut g = LayerGraph::default();
        let s = self
            .arch
            .trace_encoder(FeatureShape::new(3, resolution.0, resolution.1), &mut g)?;
        Ok((g, s))
    }

    pub fn trace_decoder(&self, latent: FeatureShape) -> Result<LayerGraph> {
        let mut g = LayerGraph::default();
        self.arch.trace_decoder(latent, &mut g)?;
        Ok(g)
    }

    /// Every parameter and buffer by name.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = self.encoder_params.to_tensors()?;
        out.extend(self.decoder_params.to_tensors()?);
        out.extend(self.encoder_buffers.to_tensors()?);
        out.extend(self.decoder_buffers.to_tensors()?);
        Ok(out)
    }

    pub fn load_state(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.encoder_params.load_from(state)?;
        self.decoder_params.load_from(state)?;
        self.encoder_buffers.load_from(state)?;
        self.decoder_buffers.load_from(state)?;
        Ok(())
    }

    pub fn all_params(&self) -> ParamMap {
        let mut all = ParamMap::new();
        for (n, v) in self.encoder_params.iter().chain(self.decoder_params.iter()) {
            all.insert(n, v.clone());
        }
        all
    }
}

impl Weights for DepthNetwork {
    fn weight(&self, name: &str) -> Result<Tensor> {
        [
            &self.encoder_params,
            &self.decoder_params,
            &self.encoder_buffers,
            &self.decoder_buffers,
        ]
        .into_iter()
        .find_map(|m| m.get(name))
        .map(|v| v.as_tensor().clone())
        .ok_or_else(|| Error::Argument(format!("unknown weight `{name}`")))
    }

    fn update_buffer(&self, name: &str, value: &Tensor) -> Result<()> {
        if self.encoder_buffers.contains(name) {
            self.encoder_buffers.update_buffer(name, value)
        } else {
            self.decoder_buffers.update_buffer(name, value)
        }
    }
}

/// A detached copy of an encoder, taken when adaptation starts.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    spec: ArchitectureSpec,
    arch: Architecture,
    weights: BTreeMap<String, Tensor>,
    latent: FeatureShape,
}

impl FrozenEncoder {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    /// Always eval mode: the snapshot never updates its statistics.
    pub fn encode(&self, images: &Tensor) -> Result<LatentCode> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 || (h, w) != self.spec.input_resolution {
            return Err(Error::Shape(format!(
                "frozen encoder expects 3 x {:?} input, got {:?}",
                self.spec.input_resolution,
                images.dims()
            )));
        }
        if b == 0 {
            return Ok(LatentCode {
                values: Tensor::zeros(
                    (0, self.latent.channels, self.latent.height, self.latent.width),
                    images.dtype(),
                    images.device(),
                )?,
                skips: Vec::new(),
            });
        }
        let z = self.arch.encode(&self.weights, images, Mode::Eval)?;
        Ok(z.detach())
    }

    pub fn fingerprint(&self) -> Result<String> {
        let mut m = ParamMap::new();
        for (k, t) in &self.weights {
            m.insert(k, candle_core::Var::from_tensor(t)?);
        }
        m.fingerprint()
    }

    /// Rebuilds a snapshot from checkpointed tensors.
    pub fn from_weights(spec: ArchitectureSpec, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = DepthNetwork::build(spec, &mut crate::rng::seeded_rng(0, "template"), DType::F32)?;
        for name in template.encoder_params.names().chain(template.encoder_buffers.names()) {
            if !weights.contains_key(name) {
                return Err(Error::Checkpoint(format!("frozen encoder misses `{name}`")));
            }
        }
        Ok(FrozenEncoder {
            spec,
            arch: template.arch.clone(),
            latent: template.latent_shape(),
            weights,
        })
    }
}
