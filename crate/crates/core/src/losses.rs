//! Least-squares adversarial losses with the phase gate, the latent
//! consistency regularizer, and the supervised L1 pretraining loss.
//!
//! All functions take and return candle tensors so they are differentiable;
//! scalar results are 0-d tensors. Expectations are batch means, patch maps
//! are additionally averaged over positions.

use std::fmt;

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.7;

/// `gamma = 1`: discriminator update. `gamma = 0`: target-encoder update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdatePhase {
    Discriminator,
    Encoder,
}

impl UpdatePhase {
    pub fn gamma(&self) -> u8 {
        match self {
            UpdatePhase::Discriminator => 1,
            UpdatePhase::Encoder => 0,
        }
    }

    pub fn from_gamma(gamma: u8) -> Result<Self> {
        match gamma {
            1 => Ok(UpdatePhase::Discriminator),
            0 => Ok(UpdatePhase::Encoder),
            g => Err(Error::Argument(format!("gamma must be 0 or 1, got {g}"))),
        }
    }
}

impl fmt::Display for UpdatePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.gamma())
    }
}

fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_all()?.mean(D::Minus1)?)
}

fn nonempty(x: &Tensor, what: &str) -> Result<()> {
    if x.elem_count() == 0 {
        return Err(Error::Argument(format!("{what} scores are empty")));
    }
    Ok(())
}

/// `mean((s - target)^2)` over every element.
fn lsgan_term(scores: &Tensor, target: f64) -> Result<Tensor> {
    mean_all(&(scores - target)?.sqr()?)
}

fn lsgan(source: &Tensor, target: &Tensor, phase: UpdatePhase) -> Result<Tensor> {
    match phase {
        UpdatePhase::Discriminator => {
            nonempty(source, "source")?;
            nonempty(target, "target")?;
            Ok((lsgan_term(source, 1.0)? + lsgan_term(target, 0.0)?)?)
        }
        UpdatePhase::Encoder => {
            nonempty(target, "target")?;
            lsgan_term(target, 1.0)
        }
    }
}

/// Latent discriminator objective. `scores_*` hold one score per sample.
/// In the encoder phase the source scores are ignored and may be empty.
pub fn latent_adversarial_loss(
    scores_source: &Tensor,
    scores_target: &Tensor,
    phase: UpdatePhase,
) -> Result<Tensor> {
    lsgan(scores_source, scores_target, phase)
}

/// Depth discriminator objective over patch score maps: real pairs are
/// source images with their ground truth, fake pairs are target images with
/// predicted depth.
pub fn depth_adversarial_loss(
    scores_real: &Tensor,
    scores_fake: &Tensor,
    phase: UpdatePhase,
) -> Result<Tensor> {
    lsgan(scores_real, scores_fake, phase)
}

/// Mean absolute difference between the frozen source encoder's and the
/// target encoder's latents for the same target images. The discriminator
/// phase returns a literal zero.
pub fn consistency_loss(
    latent_source_on_target: &Tensor,
    latent_target_on_target: &Tensor,
    phase: UpdatePhase,
) -> Result<Tensor> {
    if latent_source_on_target.dims() != latent_target_on_target.dims() {
        return Err(Error::Shape(format!(
            "consistency loss needs matching latents, got {:?} and {:?}",
            latent_source_on_target.dims(),
            latent_target_on_target.dims()
        )));
    }
    match phase {
        UpdatePhase::Discriminator => Ok(Tensor::new(0f32, latent_target_on_target.device())?
            .to_dtype(latent_target_on_target.dtype())?),
        UpdatePhase::Encoder => {
            nonempty(latent_target_on_target, "latent")?;
            mean_all(&(latent_source_on_target - latent_target_on_target)?.abs()?)
        }
    }
}

/// One term of the combined objective, tagged with the phase it was
/// computed under.
#[derive(Clone, Debug)]
pub struct LossPart {
    pub value: Tensor,
    pub phase: UpdatePhase,
}

impl LossPart {
    pub fn new(value: Tensor, phase: UpdatePhase) -> Self {
        Self { value, phase }
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub phase: UpdatePhase,
    pub l_ld: Tensor,
    pub l_dd: Tensor,
    pub l_reg: Tensor,
    pub total: Tensor,
    pub lambda_reg: f64,
}

/// Plain scalar view of a [`LossBreakdown`] for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub phase: UpdatePhase,
    pub l_ld: f64,
    pub l_dd: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.l_ld, self.l_dd, self.l_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

impl LossBreakdown {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            phase: self.phase,
            l_ld: scalar(&self.l_ld)?,
            l_dd: scalar(&self.l_dd)?,
            l_reg: scalar(&self.l_reg)?,
            total: scalar(&self.total)?,
        })
    }
}

/// `total = l_ld + l_dd + lambda_reg * l_reg`.
pub fn combined_adaptation_loss(
    l_ld: LossPart,
    l_dd: LossPart,
    l_reg: LossPart,
    lambda_reg: f64,
) -> Result<LossBreakdown> {
    if l_ld.phase != l_dd.phase || l_ld.phase != l_reg.phase {
        return Err(Error::Argument(format!(
            "loss parts computed under different phases (gamma {}, {}, {})",
            l_ld.phase, l_dd.phase, l_reg.phase
        )));
    }
    if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
        return Err(Error::Argument(format!("lambda must be nonnegative, got {lambda_reg}")));
    }
    let total = ((&l_ld.value + &l_dd.value)? + (&l_reg.value * lambda_reg)?)?;
    Ok(LossBreakdown {
        phase: l_ld.phase,
        l_ld: l_ld.value,
        l_dd: l_dd.value,
        l_reg: l_reg.value,
        total,
        lambda_reg,
    })
}

/// Sum of absolute errors over valid pixels and the valid-pixel count.
/// Used directly by gradient accumulation, which weights sub-batches by
/// their pixel counts.
pub fn masked_l1_sum(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<(Tensor, f64)> {
    if pred.dims() != gt.dims() || gt.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "L1 loss needs matching shapes, got {:?}, {:?}, {:?}",
            pred.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    let count = scalar(&mask.flatten_all()?.sum(D::Minus1)?)?;
    let sum = ((pred - gt)?.abs()? * mask)?.flatten_all()?.sum(D::Minus1)?;
    Ok((sum, count))
}

/// Mean absolute error over pixels where `mask` is 1.
pub fn supervised_l1_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (sum, count) = masked_l1_sum(pred, gt, mask)?;
    if count <= 0.0 {
        return Err(Error::Argument("no valid ground-truth pixels".into()));
    }
    Ok((sum / count)?)
}
