use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use super::{
    checkpoint_path, diverged, epoch_batches, prefixed, prepare_item, sub_batches, to_batch, unix_now, AdaptConfig,
    EpochStats, IterationLog,
};
use crate::checkpoint::{Checkpoint, CheckpointKind, Manifest};
use crate::datasets::{PairedDataset, UnpairedDataset};
use crate::discriminators::{DepthDiscriminator, DropoutStream, LatentDiscriminator, LdVariant};
use crate::error::{Error, Result};
use crate::losses::{
    combined_adaptation_loss, consistency_loss, depth_adversarial_loss, latent_adversarial_loss, LossPart,
    LossValues, UpdatePhase,
};
use crate::networks::{ArchitectureSpec, DepthNetwork, FrozenEncoder};
use crate::nn::Mode;
use crate::optim::{accumulate, collect_gradients, Gradients, Optimizer};
use crate::resources::{peak_memory_bytes, EpochTimer};
use crate::rng::seeded_rng;

/// Everything that changes during adaptation, plus the frozen references.
pub struct AdaptationState {
    /// Target encoder (adaptable part changes) with the shared decoder.
    pub network: DepthNetwork,
    pub frozen_source: FrozenEncoder,
    pub ld: LatentDiscriminator,
    pub dd: DepthDiscriminator,
    pub opt_encoder: Optimizer,
    pub opt_ld: Optimizer,
    pub opt_dd: Optimizer,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed iterations.
    pub iteration: u64,
    pub seed: u64,
    /// Mean consistency loss of the first epoch, for the collapse watchdog.
    pub first_epoch_reg: Option<f64>,
}

impl AdaptationState {
    pub fn new(pretrained: &DepthNetwork, cfg: &AdaptConfig, max_depth: f32) -> Result<Self> {
        cfg.validate()?;
        let network = pretrained.deep_copy()?;
        let frozen_source = pretrained.snapshot_frozen_encoder()?;
        let variant: LdVariant = cfg.ld_variant.parse()?;
        let dtype = network.dtype();
        let ld = LatentDiscriminator::build(
            variant,
            network.latent_shape(),
            &mut seeded_rng(cfg.seed, "adapt/ld-init"),
            dtype,
        )?;
        let dd = DepthDiscriminator::build(
            network.spec().input_resolution,
            cfg.dd_base_width,
            max_depth,
            &mut seeded_rng(cfg.seed, "adapt/dd-init"),
            dtype,
        )?;
        let kind = cfg.optimizer.kind();
        Ok(Self {
            opt_encoder: Optimizer::new(kind, cfg.lr_encoder, network.adaptable_parameters())?,
            opt_ld: Optimizer::new(kind, cfg.lr_ld, ld.params.clone())?,
            opt_dd: Optimizer::new(kind, cfg.lr_dd, dd.params.clone())?,
            network,
            frozen_source,
            ld,
            dd,
            epoch: 0,
            iteration: 0,
            seed: cfg.seed,
            first_epoch_reg: None,
        })
    }

    fn settings(&self, cfg: &AdaptConfig) -> BTreeMap<String, String> {
        let mut s = cfg.settings();
        s.insert("max_depth".into(), self.dd.max_depth().to_string());
        s
    }

    pub fn to_checkpoint(&self, cfg: &AdaptConfig) -> Result<Checkpoint> {
        let spec = self.network.spec();
        let mut manifest = Manifest::new(CheckpointKind::Adapt, spec.id.as_str(), spec.input_resolution, self.seed);
        manifest.epoch = self.epoch;
        manifest.iteration = self.iteration;
        manifest.settings = self.settings(cfg);
        let mut ckpt = Checkpoint::new(manifest);
        ckpt.insert_all(prefixed("net.", self.network.state()?));
        ckpt.insert_all(prefixed("frozen.", self.frozen_source.weights().clone()));
        ckpt.insert_all(prefixed("disc.", self.ld.params.to_tensors()?));
        ckpt.insert_all(prefixed("disc.", self.dd.params.to_tensors()?));
        for (name, opt) in [("encoder", &self.opt_encoder), ("ld", &self.opt_ld), ("dd", &self.opt_dd)] {
            let (arrays, steps) = opt.state(&format!("opt.{name}"))?;
            ckpt.insert_all(arrays);
            ckpt.manifest.counters.insert(format!("opt.{name}.steps"), steps);
        }
        if let Some(r) = self.first_epoch_reg {
            ckpt.manifest.counters.insert("first_epoch_reg_bits".into(), r.to_bits());
        }
        Ok(ckpt)
    }

    /// Restores a state written by [`AdaptationState::to_checkpoint`],
    /// refusing when the run settings differ.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &AdaptConfig) -> Result<Self> {
        let m = &ckpt.manifest;
        if m.kind != CheckpointKind::Adapt {
            return Err(Error::Checkpoint(format!("expected an adapt checkpoint, found {:?}", m.kind)));
        }
        let max_depth: f32 = m
            .settings
            .get("max_depth")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("manifest lacks max_depth".into()))?;
        let spec = ArchitectureSpec::new(m.architecture.parse()?, m.resolution[0], m.resolution[1]);
        let network = DepthNetwork::from_state(spec, &ckpt.strip_prefix("net."), DType::F32)?;
        let mut state = AdaptationState::new(&network, cfg, max_depth)?;
        let diff = m.diff_settings(&state.settings(cfg));
        if !diff.is_empty() || m.seed != cfg.seed {
            let mut diff = diff;
            if m.seed != cfg.seed {
                diff.push(format!("seed: checkpoint `{}`, config `{}`", m.seed, cfg.seed));
            }
            return Err(Error::ManifestMismatch(diff));
        }
        state.frozen_source = FrozenEncoder::from_weights(spec, ckpt.strip_prefix("frozen."))?;
        let disc = ckpt.strip_prefix("disc.");
        state.ld.params.load_from(&disc)?;
        state.dd.params.load_from(&disc)?;
        for (name, opt) in [
            ("encoder", &mut state.opt_encoder),
            ("ld", &mut state.opt_ld),
            ("dd", &mut state.opt_dd),
        ] {
            let steps = m.counters.get(&format!("opt.{name}.steps")).copied().unwrap_or(0);
            opt.load_state(&format!("opt.{name}"), &ckpt.arrays, steps)?;
        }
        state.epoch = m.epoch;
        state.iteration = m.iteration;
        state.first_epoch_reg = m.counters.get("first_epoch_reg_bits").map(|b| f64::from_bits(*b));
        Ok(state)
    }
}

/// Observer of the training loop. `after_epoch` returning `false` stops the
/// run after that epoch's checkpoint is written.
pub trait AdaptHooks {
    fn before_phase(&mut self, _state: &AdaptationState, _phase: UpdatePhase) -> Result<()> {
        Ok(())
    }

    fn after_phase(&mut self, _state: &AdaptationState, _phase: UpdatePhase, _losses: &LossValues) -> Result<()> {
        Ok(())
    }

    fn after_epoch(&mut self, _state: &AdaptationState, _stats: &EpochStats) -> Result<bool> {
        Ok(true)
    }
}

pub struct NoHooks;

impl AdaptHooks for NoHooks {}

pub struct AdaptOutcome {
    pub state: AdaptationState,
    pub log: Vec<IterationLog>,
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// Adapts a copy of `pretrained` to the target domain. `source` and
/// `target` are the equal-size subsets A and B.
pub fn adapt(
    pretrained: &DepthNetwork,
    source: &PairedDataset,
    target: &UnpairedDataset,
    cfg: &AdaptConfig,
    checkpoint_dir: Option<&Path>,
    hooks: &mut dyn AdaptHooks,
) -> Result<AdaptOutcome> {
    check_sizes(source, target, cfg)?;
    let max_depth = source.max_depth.unwrap_or_else(|| max_gt_depth(source));
    let state = AdaptationState::new(pretrained, cfg, max_depth)?;
    run(state, source, target, cfg, checkpoint_dir, hooks)
}

/// Continues the run stored at `checkpoint` until `cfg.epochs`.
pub fn resume_adaptation(
    checkpoint: &Path,
    source: &PairedDataset,
    target: &UnpairedDataset,
    cfg: &AdaptConfig,
    checkpoint_dir: Option<&Path>,
    hooks: &mut dyn AdaptHooks,
) -> Result<AdaptOutcome> {
    check_sizes(source, target, cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = AdaptationState::from_checkpoint(&ckpt, cfg)?;
    run(state, source, target, cfg, checkpoint_dir, hooks)
}

fn check_sizes(source: &PairedDataset, target: &UnpairedDataset, cfg: &AdaptConfig) -> Result<()> {
    cfg.validate()?;
    if source.len() != target.len() {
        return Err(Error::Argument(format!(
            "adaptation needs equal-size subsets, got {} source and {} target samples",
            source.len(),
            target.len()
        )));
    }
    if source.len() < cfg.batch_size_per_domain {
        return Err(Error::Argument(format!(
            "subset size {} is smaller than the batch size {}",
            source.len(),
            cfg.batch_size_per_domain
        )));
    }
    Ok(())
}

fn max_gt_depth(ds: &PairedDataset) -> f32 {
    ds.items
        .iter()
        .flat_map(|(_, d)| d.depths.iter().zip(d.valid_mask.iter()))
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .fold(1e-3, f32::max)
}

#[derive(Default)]
struct Sums {
    n: u64,
    ld: f64,
    dd: f64,
    reg: f64,
    total: f64,
}

fn run(
    mut state: AdaptationState,
    source: &PairedDataset,
    target: &UnpairedDataset,
    cfg: &AdaptConfig,
    checkpoint_dir: Option<&Path>,
    hooks: &mut dyn AdaptHooks,
) -> Result<AdaptOutcome> {
    if state.network.spec().input_resolution != state.dd.resolution() {
        return Err(Error::Config("depth discriminator and network resolutions differ".into()));
    }
    let mut outcome_log = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    while (state.epoch as usize) < cfg.epochs {
        let epoch = state.epoch;
        let timer = EpochTimer::start();
        let start_unix = unix_now();
        let bs = cfg.batch_size_per_domain;
        let src_batches = epoch_batches(source.len(), bs, &mut seeded_rng(cfg.seed, "adapt/shuffle-source").derive(epoch));
        let tgt_batches = epoch_batches(target.len(), bs, &mut seeded_rng(cfg.seed, "adapt/shuffle-target").derive(epoch));
        let mut sums = Sums::default();
        for (sb, tb) in src_batches.iter().zip(&tgt_batches) {
            let (d_vals, e_vals) = iteration(&mut state, source, target, sb, tb, cfg, checkpoint_dir, hooks)?;
            for v in [d_vals, e_vals] {
                outcome_log.push(IterationLog {
                    iteration: state.iteration,
                    phase: v.phase.gamma(),
                    l_ld: v.l_ld,
                    l_dd: v.l_dd,
                    l_reg: v.l_reg,
                    total: v.total,
                });
            }
            sums.n += 1;
            sums.ld += e_vals.l_ld;
            sums.dd += e_vals.l_dd;
            sums.reg += e_vals.l_reg;
            sums.total += e_vals.total;
            state.iteration += 1;
        }
        state.epoch += 1;
        let n = sums.n.max(1) as f64;
        let mean_l_reg = sums.reg / n;
        let first = *state.first_epoch_reg.get_or_insert(mean_l_reg);
        let collapse = epoch > 0 && mean_l_reg > 10.0 * first;
        if collapse {
            log::warn!(
                "possible mode collapse: epoch {} mean consistency loss {mean_l_reg:.4} exceeds 10x the first epoch ({first:.4})",
                state.epoch
            );
        }
        if let Some(dir) = checkpoint_dir {
            let path = checkpoint_path(dir, "adapt", state.epoch);
            state.to_checkpoint(cfg)?.save(&path)?;
            checkpoints.push(path);
        }
        let stats = EpochStats {
            epoch: state.epoch,
            iterations: sums.n,
            mean_loss: sums.total / n,
            mean_l_ld: sums.ld / n,
            mean_l_dd: sums.dd / n,
            mean_l_reg,
            mode_collapse_warning: collapse,
            seconds: timer.elapsed_seconds(),
            start_unix,
            end_unix: unix_now(),
            peak_mem_bytes: peak_memory_bytes(),
        };
        let keep_going = hooks.after_epoch(&state, &stats)?;
        epochs.push(stats);
        if !keep_going {
            break;
        }
    }
    Ok(AdaptOutcome {
        state,
        log: outcome_log,
        epochs,
        checkpoints,
    })
}

struct DomainBatch {
    source_images: Tensor,
    source_depths: Tensor,
    target_images: Tensor,
}

fn load_batch(
    state: &AdaptationState,
    source: &PairedDataset,
    target: &UnpairedDataset,
    sb: &[usize],
    tb: &[usize],
    cfg: &AdaptConfig,
) -> Result<DomainBatch> {
    let res = state.network.spec().input_resolution;
    let aug = seeded_rng(cfg.seed, "adapt/augment").derive(state.iteration);
    let mut src = Vec::with_capacity(sb.len());
    for (k, &i) in sb.iter().enumerate() {
        let (img, dep) = &source.items[i];
        src.push(prepare_item(img, Some(dep), cfg.augment.as_ref(), res, &mut aug.derive(format!("s{k}")))?);
    }
    let mut tgt = Vec::with_capacity(tb.len());
    for (k, &i) in tb.iter().enumerate() {
        tgt.push(prepare_item(&target.items[i], None, cfg.augment.as_ref(), res, &mut aug.derive(format!("t{k}")))?);
    }
    let dtype = state.network.dtype();
    let device = state.network.device().clone();
    let s = to_batch(&src, &device, dtype)?;
    let t = to_batch(&tgt, &device, dtype)?;
    let (depths, _mask) = s.depths.ok_or_else(|| Error::Dataset("source batch lacks depth".into()))?;
    Ok(DomainBatch {
        source_images: s.images,
        source_depths: depths,
        target_images: t.images,
    })
}

fn weighted(acc: &mut LossValues, v: &LossValues, w: f64) {
    acc.l_ld += w * v.l_ld;
    acc.l_dd += w * v.l_dd;
    acc.l_reg += w * v.l_reg;
    acc.total += w * v.total;
}

fn zero_values(phase: UpdatePhase) -> LossValues {
    LossValues {
        phase,
        l_ld: 0.0,
        l_dd: 0.0,
        l_reg: 0.0,
        total: 0.0,
    }
}

#[allow(clippy::too_many_arguments)]
fn iteration(
    state: &mut AdaptationState,
    source: &PairedDataset,
    target: &UnpairedDataset,
    sb: &[usize],
    tb: &[usize],
    cfg: &AdaptConfig,
    checkpoint_dir: Option<&Path>,
    hooks: &mut dyn AdaptHooks,
) -> Result<(LossValues, LossValues)> {
    let batch = load_batch(state, source, target, sb, tb, cfg)?;
    let n = sb.len();
    let parts = sub_batches(n, cfg.sub_batch);
    let dropout = seeded_rng(cfg.seed, "adapt/dropout").derive(state.iteration);

    // gamma = 1: discriminators learn, generator outputs held constant.
    let phase = UpdatePhase::Discriminator;
    hooks.before_phase(state, phase)?;
    let mut drop_src = DropoutStream::new(dropout.derive("d/source"));
    let mut drop_tgt = DropoutStream::new(dropout.derive("d/target"));
    let mut g_ld = Gradients::new();
    let mut g_dd = Gradients::new();
    let mut d_vals = zero_values(phase);
    for &(s, e) in &parts {
        let w = (e - s) as f64 / n as f64;
        let xs = batch.source_images.narrow(0, s, e - s)?;
        let ys = batch.source_depths.narrow(0, s, e - s)?;
        let xt = batch.target_images.narrow(0, s, e - s)?;
        let zs = state.frozen_source.encode(&xs)?;
        let zt = state.network.encode(&xt, Mode::Eval)?.detach();
        let fake = state.network.decode(&zt, Mode::Eval)?.detach();
        let l_ld = latent_adversarial_loss(
            &state.ld.score(&zs.values, Mode::Train, &mut drop_src)?,
            &state.ld.score(&zt.values, Mode::Train, &mut drop_tgt)?,
            phase,
        )?;
        let l_dd = depth_adversarial_loss(&state.dd.score(&xs, &ys)?, &state.dd.score(&xt, &fake)?, phase)?;
        let l_reg = consistency_loss(&zt.values, &zt.values, phase)?;
        let losses = combined_adaptation_loss(
            LossPart::new(l_ld, phase),
            LossPart::new(l_dd, phase),
            LossPart::new(l_reg, phase),
            cfg.lambda_reg,
        )?;
        let values = losses.values()?;
        if !values.is_finite() {
            return Err(diverged(
                &state.network,
                checkpoint_dir,
                cfg.seed,
                format!("iteration {} (gamma 1): {values:?}", state.iteration),
            ));
        }
        weighted(&mut d_vals, &values, w);
        let grads = losses.total.backward()?;
        accumulate(&mut g_ld, &collect_gradients(&state.ld.params, &grads), w)?;
        accumulate(&mut g_dd, &collect_gradients(&state.dd.params, &grads), w)?;
    }
    state.opt_ld.step(&g_ld)?;
    state.opt_dd.step(&g_dd)?;
    hooks.after_phase(state, phase, &d_vals)?;

    // gamma = 0: adaptable encoder learns against fixed discriminators.
    let phase = UpdatePhase::Encoder;
    hooks.before_phase(state, phase)?;
    let mut drop_tgt = DropoutStream::new(dropout.derive("e/target"));
    let adaptable = state.network.adaptable_parameters();
    let mut g_enc = Gradients::new();
    let mut e_vals = zero_values(phase);
    for &(s, e) in &parts {
        let w = (e - s) as f64 / n as f64;
        let xt = batch.target_images.narrow(0, s, e - s)?;
        let zt = state.network.encode(&xt, Mode::Eval)?;
        let pred = state.network.decode(&zt, Mode::Eval)?;
        let ld_scores = state.ld.score(&zt.values, Mode::Train, &mut drop_tgt)?;
        let l_ld = latent_adversarial_loss(&ld_scores, &ld_scores, phase)?;
        let dd_scores = state.dd.score(&xt, &pred)?;
        let l_dd = depth_adversarial_loss(&dd_scores, &dd_scores, phase)?;
        let zs_t = state.frozen_source.encode(&xt)?;
        let l_reg = consistency_loss(&zs_t.values, &zt.values, phase)?;
        let losses = combined_adaptation_loss(
            LossPart::new(l_ld, phase),
            LossPart::new(l_dd, phase),
            LossPart::new(l_reg, phase),
            cfg.lambda_reg,
        )?;
        let values = losses.values()?;
        if !values.is_finite() {
            return Err(diverged(
                &state.network,
                checkpoint_dir,
                cfg.seed,
                format!("iteration {} (gamma 0): {values:?}", state.iteration),
            ));
        }
        weighted(&mut e_vals, &values, w);
        let grads = losses.total.backward()?;
        accumulate(&mut g_enc, &collect_gradients(&adaptable, &grads), w)?;
    }
    state.opt_encoder.step(&g_enc)?;
    hooks.after_phase(state, phase, &e_vals)?;
    Ok((d_vals, e_vals))
}
