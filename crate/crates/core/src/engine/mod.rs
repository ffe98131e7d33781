//! Supervised source pretraining and two-phase adversarial adaptation.
//!
//! Every random decision inside a run (batch order, augmentation, dropout) is
//! drawn from a stream derived from the seed and the epoch or iteration it
//! belongs to, never from a stream carried across epochs. Together with the
//! optimizer state stored in each epoch checkpoint this makes a resumed run
//! bit-identical to an uninterrupted one.

mod adapt;
mod pretrain;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, Manifest};
use crate::datasets::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::networks::{ArchitectureSpec, DepthNetwork};
use crate::optim::OptimizerKind;
use crate::rng::RngHandle;
use crate::types::{depths_to_tensors, images_to_tensor, DepthMap, ImageSample};

pub use adapt::{adapt, resume_adaptation, AdaptHooks, AdaptOutcome, AdaptationState, NoHooks};
pub use pretrain::{pretrain, pretrain_step, PretrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Split each batch into sub-batches of this size and accumulate.
    #[serde(default)]
    pub sub_batch: Option<usize>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Set by the caller; experiment files keep a single top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be at least 1".into()));
        }
        check_sub_batch(self.sub_batch, self.batch_size, "pretrain")?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "pretrain.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("pretrain.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptOptimizer {
    /// Adam with beta1 = 0.5, beta2 = 0.999.
    Adam,
    /// SGD with momentum 0.9.
    Momentum,
}

impl AdaptOptimizer {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            AdaptOptimizer::Adam => OptimizerKind::adam(0.5, 0.999),
            AdaptOptimizer::Momentum => OptimizerKind::Sgd { momentum: 0.9 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size_per_domain: usize,
    #[serde(default)]
    pub sub_batch: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda_reg: f64,
    pub lr_encoder: f64,
    pub lr_ld: f64,
    pub lr_dd: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: AdaptOptimizer,
    /// Size of each of the two equal subsets drawn for adaptation.
    #[serde(default = "default_subset_size")]
    pub n: usize,
    #[serde(skip)]
    pub seed: u64,
    /// Latent discriminator kernels: `indoor` or `outdoor`.
    #[serde(default = "default_variant")]
    pub ld_variant: String,
    /// Channel count of the first depth-discriminator convolution.
    #[serde(default = "default_dd_width")]
    pub dd_base_width: usize,
    /// Augmentation applied to both domains during adaptation.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

fn default_lambda() -> f64 {
    crate::losses::DEFAULT_LAMBDA
}

fn default_subset_size() -> usize {
    100
}

fn default_optimizer() -> AdaptOptimizer {
    AdaptOptimizer::Adam
}

fn default_variant() -> String {
    "indoor".into()
}

fn default_dd_width() -> usize {
    64
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_per_domain == 0 {
            return Err(Error::Config("adapt.batch_size_per_domain must be at least 1".into()));
        }
        check_sub_batch(self.sub_batch, self.batch_size_per_domain, "adapt")?;
        if self.n < self.batch_size_per_domain {
            return Err(Error::Config(format!(
                "adapt.n ({}) must be at least the batch size ({})",
                self.n, self.batch_size_per_domain
            )));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("adapt.lambda_reg must be nonnegative, got {}", self.lambda_reg)));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_ld", self.lr_ld), ("lr_dd", self.lr_dd)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("adapt.{name} must be positive, got {lr}")));
            }
        }
        self.ld_variant.parse::<crate::discriminators::LdVariant>()?;
        if self.dd_base_width == 0 {
            return Err(Error::Config("adapt.dd_base_width must be positive".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// The settings a resumed run must share with the checkpoint.
    pub fn settings(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("batch_size_per_domain".into(), self.batch_size_per_domain.to_string()),
            ("sub_batch".into(), format!("{:?}", self.sub_batch)),
            ("lambda_reg".into(), self.lambda_reg.to_string()),
            ("lr_encoder".into(), self.lr_encoder.to_string()),
            ("lr_ld".into(), self.lr_ld.to_string()),
            ("lr_dd".into(), self.lr_dd.to_string()),
            ("optimizer".into(), format!("{:?}", self.optimizer)),
            ("n".into(), self.n.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("ld_variant".into(), self.ld_variant.clone()),
            ("dd_base_width".into(), self.dd_base_width.to_string()),
            ("augment".into(), format!("{:?}", self.augment)),
        ])
    }
}

fn check_sub_batch(sub: Option<usize>, batch: usize, section: &str) -> Result<()> {
    if let Some(s) = sub {
        if s == 0 || batch % s != 0 {
            return Err(Error::Config(format!(
                "{section}.sub_batch ({s}) must divide the batch size ({batch})"
            )));
        }
    }
    Ok(())
}

/// Row of the per-iteration adaptation log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub phase: u8,
    pub l_ld: f64,
    pub l_dd: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Per-epoch summary. `seconds`, `start_unix`, `end_unix` and
/// `peak_mem_bytes` vary between runs; everything else is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub iterations: u64,
    /// Mean supervised loss (pretraining) or mean encoder-phase total
    /// (adaptation).
    pub mean_loss: f64,
    pub mean_l_ld: f64,
    pub mean_l_dd: f64,
    pub mean_l_reg: f64,
    pub mode_collapse_warning: bool,
    pub seconds: f64,
    pub start_unix: f64,
    pub end_unix: f64,
    pub peak_mem_bytes: Option<u64>,
}

pub(crate) fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// The sub-batch ranges `[start, end)` covering `0..n`.
pub(crate) fn sub_batches(n: usize, sub: Option<usize>) -> Vec<(usize, usize)> {
    let step = sub.unwrap_or(n).max(1);
    (0..n).step_by(step).map(|s| (s, (s + step).min(n))).collect()
}

/// Indices `0..len` shuffled by `rng`, cut into full batches.
pub(crate) fn epoch_batches(len: usize, batch: usize, rng: &mut RngHandle) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    order.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

/// Augments (or just resizes) one pair. Each item draws from its own stream.
pub(crate) fn prepare_item(
    image: &ImageSample,
    depth: Option<&DepthMap>,
    cfg: Option<&AugmentConfig>,
    resolution: (usize, usize),
    rng: &mut RngHandle,
) -> Result<(ImageSample, Option<DepthMap>)> {
    let resize = AugmentConfig::resize_only(resolution.0, resolution.1);
    let cfg = cfg.unwrap_or(&resize);
    if cfg.output_resolution != [resolution.0, resolution.1] {
        return Err(Error::Config(format!(
            "augmentation output {:?} differs from the network resolution {:?}",
            cfg.output_resolution, resolution
        )));
    }
    if !cfg.enabled && image.resolution() == resolution {
        return Ok((image.clone(), depth.cloned()));
    }
    augment(image, depth, cfg, rng).map_err(|e| e.in_sample(image.source_id.clone()))
}

pub(crate) struct Batch {
    pub images: Tensor,
    pub depths: Option<(Tensor, Tensor)>,
}

pub(crate) fn to_batch(
    items: &[(ImageSample, Option<DepthMap>)],
    device: &Device,
    dtype: DType,
) -> Result<Batch> {
    let images: Vec<&ImageSample> = items.iter().map(|(i, _)| i).collect();
    let depths: Option<Vec<&DepthMap>> = items.iter().map(|(_, d)| d.as_ref()).collect();
    Ok(Batch {
        images: images_to_tensor(&images, device, dtype)?,
        depths: match depths {
            Some(d) if !d.is_empty() => Some(depths_to_tensors(&d, device, dtype)?),
            _ => None,
        },
    })
}

/// Writes a diagnostic checkpoint of `net` and returns the divergence error.
pub(crate) fn diverged(
    net: &DepthNetwork,
    dir: Option<&Path>,
    seed: u64,
    context: String,
) -> Error {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    let path = dir.join("diagnostic.safetensors");
    let mut manifest = Manifest::new(
        CheckpointKind::Diagnostic,
        net.spec().id.as_str(),
        net.spec().input_resolution,
        seed,
    );
    manifest.settings.insert("context".into(), context.clone());
    let mut ckpt = Checkpoint::new(manifest);
    if let Ok(state) = net.state() {
        ckpt.insert_all(prefixed("net.", state));
    }
    if let Err(e) = ckpt.save(&path) {
        log::error!("could not write diagnostic checkpoint: {e}");
    }
    Error::Divergence {
        context,
        checkpoint: path,
    }
}

pub(crate) fn prefixed(prefix: &str, arrays: BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    arrays
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect()
}

/// Loads the network stored in a pretrain or adapt checkpoint.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<DepthNetwork> {
    let m = &ckpt.manifest;
    let spec = ArchitectureSpec::new(m.architecture.parse()?, m.resolution[0], m.resolution[1]);
    let state = ckpt.strip_prefix("net.");
    if state.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no network arrays".into()));
    }
    DepthNetwork::from_state(spec, &state, DType::F32)
}

/// Checkpoint holding only a network.
pub fn network_checkpoint(net: &DepthNetwork, kind: CheckpointKind, seed: u64, epoch: u64) -> Result<Checkpoint> {
    let mut manifest = Manifest::new(kind, net.spec().id.as_str(), net.spec().input_resolution, seed);
    manifest.epoch = epoch;
    let mut ckpt = Checkpoint::new(manifest);
    ckpt.insert_all(prefixed("net.", net.state()?));
    Ok(ckpt)
}

pub(crate) fn checkpoint_path(dir: &Path, stem: &str, epoch: u64) -> PathBuf {
    dir.join(format!("{stem}-epoch{epoch:03}.safetensors"))
}
