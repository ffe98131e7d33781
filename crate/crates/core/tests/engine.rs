use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use depthadapt::datasets::toy::{render_sample, Shift};
use depthadapt::datasets::{PairedDataset, Split, UnpairedDataset};
use depthadapt::engine::{
    adapt, pretrain, pretrain_step, resume_adaptation, AdaptConfig, AdaptHooks, AdaptOptimizer, AdaptationState,
    EpochStats, NoHooks, PretrainConfig,
};
use depthadapt::losses::{LossValues, UpdatePhase};
use depthadapt::networks::{build_depth_network, ArchitectureId, ArchitectureSpec, DepthNetwork};
use depthadapt::nn::Mode;
use depthadapt::optim::{Optimizer, OptimizerKind};
use depthadapt::params::{tensor_le_bytes, ParamMap};
use depthadapt::rng::seeded_rng;
use depthadapt::types::{DepthMap, ImageSample};
use depthadapt::Error;

const RES: usize = 96;
const PLANE_RES: usize = 64;

fn net_at(seed: u64, res: usize) -> DepthNetwork {
    build_depth_network(ArchitectureSpec::new(ArchitectureId::LightweightTiny, res, res), &mut seeded_rng(seed, "init")).unwrap()
}

fn net(seed: u64) -> DepthNetwork {
    net_at(seed, RES)
}

fn paired(n: usize, label: &str) -> PairedDataset {
    let s = seeded_rng(11, label);
    let items = (0..n)
        .map(|i| {
            let (img, d, _) = render_sample((RES, RES), Shift::None, &mut s.derive(i), &format!("{i}")).unwrap();
            (img, d)
        })
        .collect();
    PairedDataset {
        name: label.into(),
        split: Split::Train,
        max_depth: Some(10.0),
        items,
    }
}

fn unpaired(n: usize, label: &str) -> UnpairedDataset {
    let s = seeded_rng(12, label);
    let items = (0..n)
        .map(|i| render_sample((RES, RES), Shift::Photometric, &mut s.derive(i), &format!("{i}")).unwrap().0)
        .collect();
    UnpairedDataset {
        name: label.into(),
        split: Split::Train,
        items,
    }
}

fn adapt_cfg(epochs: usize, batch: usize, n: usize) -> AdaptConfig {
    AdaptConfig {
        epochs,
        batch_size_per_domain: batch,
        sub_batch: None,
        lambda_reg: 0.7,
        lr_encoder: 2e-4,
        lr_ld: 2e-4,
        lr_dd: 2e-4,
        optimizer: AdaptOptimizer::Adam,
        n,
        seed: 5,
        ld_variant: "indoor".into(),
        dd_base_width: 8,
        augment: None,
    }
}

fn fp(m: &ParamMap) -> String {
    m.fingerprint().unwrap()
}

fn flat(m: &ParamMap) -> Vec<f64> {
    m.iter()
        .flat_map(|(_, v)| v.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap())
        .collect()
}

fn state_bytes(state: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<u8>> {
    state.iter().map(|(k, t)| (k.clone(), tensor_le_bytes(t).unwrap())).collect()
}

#[test]
fn unequal_subsets_are_an_argument_error() {
    let r = adapt(&net(0), &paired(4, "a"), &unpaired(5, "b"), &adapt_cfg(1, 2, 4), None, &mut NoHooks);
    assert!(matches!(r, Err(Error::Argument(_))));
}

#[test]
fn full_run_keeps_frozen_parts_and_checkpoints_each_epoch() {
    let pre = net(1);
    let dir = tempfile::tempdir().unwrap();
    let out = adapt(&pre, &paired(8, "a"), &unpaired(8, "b"), &adapt_cfg(2, 4, 8), Some(dir.path()), &mut NoHooks).unwrap();
    let after = &out.state.network;
    assert_eq!(fp(&after.decoder_params), fp(&pre.decoder_params));
    assert_eq!(fp(&after.frozen_encoder_parameters()), fp(&pre.frozen_encoder_parameters()));
    assert_eq!(fp(&after.encoder_buffers), fp(&pre.encoder_buffers));
    assert_eq!(
        out.state.frozen_source.fingerprint().unwrap(),
        pre.snapshot_frozen_encoder().unwrap().fingerprint().unwrap()
    );
    assert_ne!(fp(&after.adaptable_parameters()), fp(&pre.adaptable_parameters()));
    assert_eq!(out.checkpoints.len(), 2);
    assert!(out.checkpoints.iter().all(|p| p.exists()));
    assert_eq!(out.log.len(), 2 * 2 * 2);
    assert!(out.log.iter().all(|r| [r.l_ld, r.l_dd, r.l_reg, r.total].iter().all(|v| v.is_finite())));
    assert!(out.log.iter().filter(|r| r.phase == 1).all(|r| r.l_reg == 0.0));
}

/// Hashes the learners before and after every phase.
struct PhaseProbe {
    before: Option<(String, String, String)>,
    checked: usize,
}

fn hashes(s: &AdaptationState) -> (String, String, String) {
    (fp(&s.network.adaptable_parameters()), fp(&s.ld.params), fp(&s.dd.params))
}

impl AdaptHooks for PhaseProbe {
    fn before_phase(&mut self, s: &AdaptationState, _phase: UpdatePhase) -> depthadapt::Result<()> {
        self.before = Some(hashes(s));
        Ok(())
    }

    fn after_phase(&mut self, s: &AdaptationState, phase: UpdatePhase, v: &LossValues) -> depthadapt::Result<()> {
        let (enc0, ld0, dd0) = self.before.take().unwrap();
        let (enc1, ld1, dd1) = hashes(s);
        match phase {
            UpdatePhase::Discriminator => {
                assert_eq!(enc0, enc1);
                assert_eq!(v.l_reg, 0.0);
                assert!(ld0 != ld1 && dd0 != dd1);
            }
            UpdatePhase::Encoder => {
                assert!(ld0 == ld1 && dd0 == dd1);
                assert_ne!(enc0, enc1);
            }
        }
        self.checked += 1;
        Ok(())
    }
}

#[test]
fn each_phase_changes_only_its_learners() {
    let mut probe = PhaseProbe {
        before: None,
        checked: 0,
    };
    adapt(&net(2), &paired(8, "a"), &unpaired(8, "b"), &adapt_cfg(2, 2, 8), None, &mut probe).unwrap();
    assert_eq!(probe.checked, 2 * 4 * 2);
}

/// Parameter deltas after one adaptation iteration with SGD, where the
/// update is proportional to the accumulated gradient.
fn one_iteration_deltas(batch: usize, sub: Option<usize>) -> Vec<f64> {
    let pre = net(3);
    let mut cfg = adapt_cfg(1, batch, batch);
    cfg.optimizer = AdaptOptimizer::Momentum;
    cfg.sub_batch = sub;
    cfg.lr_encoder = 1.0;
    cfg.lr_ld = 1.0;
    cfg.lr_dd = 1.0;
    let a = paired(batch, "a");
    let b = unpaired(batch, "b");
    let init = AdaptationState::new(&pre, &cfg, 10.0).unwrap();
    let before: Vec<f64> = [flat(&pre.adaptable_parameters()), flat(&init.ld.params), flat(&init.dd.params)].concat();
    let out = adapt(&pre, &a, &b, &cfg, None, &mut NoHooks).unwrap();
    let s = &out.state;
    let after: Vec<f64> = [flat(&s.network.adaptable_parameters()), flat(&s.ld.params), flat(&s.dd.params)].concat();
    after.iter().zip(&before).map(|(x, y)| x - y).collect()
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den
}

#[test]
fn two_sub_batches_of_two_match_a_batch_of_four() {
    let full = one_iteration_deltas(4, None);
    let split = one_iteration_deltas(4, Some(2));
    let gap = relative_gap(&full, &split);
    assert!(gap <= 1e-5, "{gap}");
}

#[test]
fn single_sample_sub_batches_over_three() {
    let full = one_iteration_deltas(3, None);
    let split = one_iteration_deltas(3, Some(1));
    let gap = relative_gap(&full, &split);
    assert!(gap <= 1e-5, "{gap}");
}

#[test]
fn sub_batch_equal_to_batch_is_the_same_path() {
    assert_eq!(one_iteration_deltas(2, None), one_iteration_deltas(2, Some(2)));
}

struct StopAfter(u64);

impl AdaptHooks for StopAfter {
    fn after_epoch(&mut self, _s: &AdaptationState, stats: &EpochStats) -> depthadapt::Result<bool> {
        Ok(stats.epoch < self.0)
    }
}

#[test]
fn resume_is_bit_identical() {
    let pre = net(4);
    let a = paired(8, "a");
    let b = unpaired(8, "b");
    let cfg = adapt_cfg(4, 4, 8);
    let whole_dir = tempfile::tempdir().unwrap();
    let whole = adapt(&pre, &a, &b, &cfg, Some(whole_dir.path()), &mut NoHooks).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = adapt(&pre, &a, &b, &cfg, Some(dir.path()), &mut StopAfter(2)).unwrap();
    assert_eq!(first.state.epoch, 2);
    let second = resume_adaptation(&first.checkpoints[1], &a, &b, &cfg, Some(dir.path()), &mut NoHooks).unwrap();
    assert_eq!(second.state.epoch, 4);

    assert_eq!(
        state_bytes(&whole.state.network.state().unwrap()),
        state_bytes(&second.state.network.state().unwrap())
    );
    assert_eq!(fp(&whole.state.ld.params), fp(&second.state.ld.params));
    assert_eq!(fp(&whole.state.dd.params), fp(&second.state.dd.params));
    let joined: Vec<_> = first.log.iter().chain(&second.log).copied().collect();
    assert_eq!(whole.log, joined);
    let last = |d: &std::path::Path| std::fs::read(d.join("adapt-epoch004.safetensors")).unwrap();
    assert_eq!(last(whole_dir.path()), last(dir.path()));
}

#[test]
fn resume_refuses_a_different_lambda() {
    let a = paired(4, "a");
    let b = unpaired(4, "b");
    let cfg = adapt_cfg(1, 4, 4);
    let dir = tempfile::tempdir().unwrap();
    let out = adapt(&net(5), &a, &b, &cfg, Some(dir.path()), &mut NoHooks).unwrap();
    let other = AdaptConfig {
        lambda_reg: 0.5,
        epochs: 2,
        ..cfg
    };
    match resume_adaptation(&out.checkpoints[0], &a, &b, &other, None, &mut NoHooks) {
        Err(Error::ManifestMismatch(diff)) => assert!(diff.iter().any(|d| d.contains("lambda")), "{diff:?}"),
        other => panic!("expected a mismatch, got {:?}", other.err()),
    }
}

#[test]
fn resume_from_missing_file_is_an_io_error() {
    let r = resume_adaptation(
        std::path::Path::new("/nonexistent/adapt.safetensors"),
        &paired(4, "a"),
        &unpaired(4, "b"),
        &adapt_cfg(1, 4, 4),
        None,
        &mut NoHooks,
    );
    assert!(matches!(r, Err(Error::Io { .. })), "{:?}", r.err());
}

fn pretrain_cfg(epochs: usize, batch: usize, lr: f64) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        momentum: 0.9,
        sub_batch: None,
        augment: None,
        seed: 9,
    }
}

#[test]
fn zero_pretrain_epochs_leave_the_network_unchanged() {
    let n = net(6);
    let before = state_bytes(&n.state().unwrap());
    pretrain(&n, &paired(4, "a"), &pretrain_cfg(0, 2, 0.01), None, &mut |_| {}).unwrap();
    assert_eq!(state_bytes(&n.state().unwrap()), before);
}

fn batch_tensors(ds: &PairedDataset) -> (Tensor, Tensor, Tensor) {
    let imgs: Vec<&ImageSample> = ds.items.iter().map(|(i, _)| i).collect();
    let deps: Vec<&DepthMap> = ds.items.iter().map(|(_, d)| d).collect();
    let x = depthadapt::types::images_to_tensor(&imgs, &Device::Cpu, DType::F32).unwrap();
    let (y, m) = depthadapt::types::depths_to_tensors(&deps, &Device::Cpu, DType::F32).unwrap();
    (x, y, m)
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let n = net(7);
    let (x, y, m) = batch_tensors(&paired(4, "a"));
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }, 1e-5, n.all_params()).unwrap();
    let before = pretrain_step(&n, &mut opt, &x, &y, &m, None).unwrap().unwrap();
    let pred = n.forward_depth(&x, Mode::Train).unwrap();
    let after: f64 = depthadapt::losses::supervised_l1_loss(&pred, &y, &m)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar()
        .unwrap();
    assert!(after < before, "{after} >= {before}");
}

/// Frames tiled with fronto-parallel planes whose depth is a fixed
/// function of their color.
fn planes(n: usize) -> PairedDataset {
    const TILE: usize = 8;
    let s = seeded_rng(13, "planes");
    let items = (0..n)
        .map(|i| {
            let mut rng = s.derive(i);
            let k = PLANE_RES / TILE;
            let t: Vec<f32> = (0..k * k).map(|_| rng.uniform() as f32).collect();
            let at = |y: usize, x: usize| t[(y / TILE) * k + x / TILE];
            let pixels = ndarray::Array3::from_shape_fn((PLANE_RES, PLANE_RES, 3), |(y, x, c)| {
                let t = at(y, x);
                [0.1 + 0.8 * t, 0.5, 0.9 - 0.8 * t][c]
            });
            let mut d = DepthMap::dense(ndarray::Array2::from_shape_fn((PLANE_RES, PLANE_RES), |(y, x)| 1.0 + 8.0 * at(y, x)));
            d.max_depth = Some(10.0);
            (ImageSample::new(pixels, &format!("{i}")).unwrap(), d)
        })
        .collect();
    PairedDataset {
        name: "planes".into(),
        split: Split::Train,
        max_depth: Some(10.0),
        items,
    }
}

#[test]
fn constant_planes_converge() {
    let n = net_at(8, PLANE_RES);
    let ds = planes(96);
    let mut losses = Vec::new();
    pretrain(&n, &ds, &pretrain_cfg(50, 8, 0.03), None, &mut |s| losses.push(s.mean_loss)).unwrap();
    let (x, y, m) = batch_tensors(&ds);
    let eval = |n: &DepthNetwork| -> f64 {
        let pred = n.forward_depth(&x, Mode::Eval).unwrap();
        depthadapt::losses::supervised_l1_loss(&pred, &y, &m).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    };
    let initial = eval(&net_at(8, PLANE_RES));
    let last = *losses.last().unwrap();
    assert!(last < 0.1 * initial, "train loss {last} vs initial {initial}: {losses:?}");
    assert!(eval(&n) < 0.1 * initial, "eval loss {} vs initial {initial}", eval(&n));
}
