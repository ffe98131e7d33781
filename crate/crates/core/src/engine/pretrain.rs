use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};

use super::{
    checkpoint_path, diverged, epoch_batches, network_checkpoint, prepare_item, sub_batches, to_batch, unix_now,
    EpochStats, PretrainConfig,
};
use crate::checkpoint::CheckpointKind;
use crate::datasets::PairedDataset;
use crate::error::{Error, Result};
use crate::losses::masked_l1_sum;
use crate::networks::DepthNetwork;
use crate::nn::Mode;
use crate::optim::{accumulate, collect_gradients, Gradients, Optimizer, OptimizerKind};
use crate::resources::{peak_memory_bytes, EpochTimer};
use crate::rng::seeded_rng;

pub struct PretrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// One momentum-SGD step on the masked L1 loss of a batch. Each sub-batch
/// contributes `sum_k / count`, where `count` is the valid-pixel count of the
/// whole batch, so the accumulated gradient is that of the batch mean.
/// Returns the batch loss before the update, or `None` when the batch holds
/// no valid pixel.
pub fn pretrain_step(
    net: &DepthNetwork,
    opt: &mut Optimizer,
    images: &Tensor,
    depths: &Tensor,
    mask: &Tensor,
    sub_batch: Option<usize>,
) -> Result<Option<f64>> {
    let n = images.dim(0)?;
    let count: f64 = mask.to_dtype(DType::F64)?.flatten_all()?.sum(D::Minus1)?.to_scalar()?;
    if count <= 0.0 {
        return Ok(None);
    }
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    for (s, e) in sub_batches(n, sub_batch) {
        let pred = net.forward_depth(&images.narrow(0, s, e - s)?, Mode::Train)?;
        let (sum, _) = masked_l1_sum(&pred, &depths.narrow(0, s, e - s)?, &mask.narrow(0, s, e - s)?)?;
        let part = (sum / count)?;
        loss += part.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let g = part.backward()?;
        accumulate(&mut grads, &collect_gradients(opt.params(), &g), 1.0)?;
    }
    if loss.is_finite() {
        opt.step(&grads)?;
    }
    Ok(Some(loss))
}

/// Supervised training of `net` in place on `source`.
pub fn pretrain(
    net: &DepthNetwork,
    source: &PairedDataset,
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.epochs > 0 && source.len() < cfg.batch_size {
        return Err(Error::Argument(format!(
            "dataset of {} samples is smaller than the batch size {}",
            source.len(),
            cfg.batch_size
        )));
    }
    let res = net.spec().input_resolution;
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd { momentum: cfg.momentum },
        cfg.learning_rate,
        net.all_params(),
    )?;
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut iteration = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let timer = EpochTimer::start();
        let start_unix = unix_now();
        let batches = epoch_batches(source.len(), cfg.batch_size, &mut seeded_rng(cfg.seed, "pretrain/shuffle").derive(epoch));
        let mut losses = Vec::with_capacity(batches.len());
        for idx in &batches {
            let aug = seeded_rng(cfg.seed, "pretrain/augment").derive(iteration);
            let mut items = Vec::with_capacity(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                let (img, dep) = &source.items[i];
                items.push(prepare_item(img, Some(dep), cfg.augment.as_ref(), res, &mut aug.derive(k))?);
            }
            let batch = to_batch(&items, net.device(), net.dtype())?;
            let (depths, mask) = batch.depths.expect("paired items carry depth");
            iteration += 1;
            let Some(loss) = pretrain_step(net, &mut opt, &batch.images, &depths, &mask, cfg.sub_batch)? else {
                log::warn!("epoch {}: skipped a batch without valid depth", epoch + 1);
                continue;
            };
            if !loss.is_finite() {
                return Err(diverged(
                    net,
                    checkpoint_dir,
                    cfg.seed,
                    format!("pretraining epoch {} iteration {iteration}: loss {loss}", epoch + 1),
                ));
            }
            losses.push(loss);
        }
        if let Some(dir) = checkpoint_dir {
            let path = checkpoint_path(dir, "pretrain", epoch + 1);
            let mut ckpt = network_checkpoint(net, CheckpointKind::Pretrain, cfg.seed, epoch + 1)?;
            ckpt.manifest.iteration = iteration;
            ckpt.save(&path)?;
            checkpoints.push(path);
        }
        let mean = crate::resources::mean(&losses).unwrap_or(f64::NAN);
        let stats = EpochStats {
            epoch: epoch + 1,
            iterations: batches.len() as u64,
            mean_loss: mean,
            mean_l_ld: 0.0,
            mean_l_dd: 0.0,
            mean_l_reg: 0.0,
            mode_collapse_warning: false,
            seconds: timer.elapsed_seconds(),
            start_unix,
            end_unix: unix_now(),
            peak_mem_bytes: peak_memory_bytes(),
        };
        on_epoch(&stats);
        epochs.push(stats);
    }
    Ok(PretrainOutcome { epochs, checkpoints })
}
