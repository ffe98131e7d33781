//! The acceptance suite: one PASS/FAIL line per criterion.
//!
//! ```text
//! cargo test --release -p depthadapt-cli --test acceptance
//! ```
//! Pass criterion numbers as arguments to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use common::{code, depthadapt, s, stderr, without_columns};
use depthadapt::datasets::toy::{render_sample, Shift};
use depthadapt::datasets::{PairedDataset, Split as DataSplit, UnpairedDataset};
use depthadapt::engine::{adapt, AdaptConfig, AdaptHooks, AdaptOptimizer, AdaptationState, NoHooks};
use depthadapt::losses::{
    combined_adaptation_loss, consistency_loss, depth_adversarial_loss, latent_adversarial_loss, LossPart, LossValues,
    UpdatePhase,
};
use depthadapt::metrics::{evaluate_predictions, median_scale, pixel_stats, EvalProtocol};
use depthadapt::networks::{build_depth_network, ArchitectureId, ArchitectureSpec, DepthNetwork};
use depthadapt::nn::{Conv2d, FeatureShape, LayerGraph};
use depthadapt::params::ParamMap;
use depthadapt::resources::{count_graph_macs, count_macs, energy_from_power_log, layer_macs, network_graphs, PowerLog};
use depthadapt::rng::{seeded_rng, RngHandle};
use depthadapt::types::DepthMap;
use depthadapt_cli::commands::{
    cmd_adapt, cmd_evaluate, cmd_make_toy_data, cmd_pretrain, AdaptArgs, EvaluateArgs, ScalingChoice, Split, ToyArgs,
};
use depthadapt_cli::config::ExperimentConfig;
use depthadapt_cli::logs::NONDETERMINISTIC_EPOCH_COLUMNS;
use ndarray::Array2;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// 1. Metric oracle ---------------------------------------------------------

fn random_pair(rng: &mut RngHandle, h: usize, w: usize) -> (DepthMap, DepthMap) {
    let mut gt = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), true);
    let mut pred = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            gt[[y, x]] = rng.uniform_range(0.2, 10.0) as f32;
            // Around the first threshold, so all three deltas vary.
            pred[[y, x]] = gt[[y, x]] * (rng.normal() * 0.3).exp() as f32;
            mask[[y, x]] = rng.bernoulli(0.8);
            if rng.bernoulli(0.05) {
                gt[[y, x]] = 0.0;
            }
        }
    }
    (DepthMap::dense(pred), DepthMap::new(gt, mask).unwrap())
}

/// (n, within[3], squared error) by direct enumeration.
fn brute_force(pred: &DepthMap, gt: &DepthMap) -> (usize, [usize; 3], f64) {
    let mut n = 0;
    let mut within = [0; 3];
    let mut se = 0.0;
    for y in 0..gt.depths.nrows() {
        for x in 0..gt.depths.ncols() {
            let g = gt.depths[[y, x]] as f64;
            if !gt.valid_mask[[y, x]] || g <= 0.0 {
                continue;
            }
            let p = pred.depths[[y, x]] as f64;
            let r = if p > g { p / g } else { g / p };
            let mut t = 1.0;
            for w in within.iter_mut() {
                t *= 1.25;
                if r < t {
                    *w += 1;
                }
            }
            se += (p - g) * (p - g);
            n += 1;
        }
    }
    (n, within, se)
}

fn criterion_1() -> Outcome {
    let mut rng = seeded_rng(1, "acceptance/metrics");
    let protocol = EvalProtocol::default();
    let mut samples = Vec::new();
    let mut pooled = (0, [0; 3], 0.0);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let (pred, gt) = random_pair(&mut rng, 8, 8);
        let (n, within, se) = brute_force(&pred, &gt);
        let s = pixel_stats(&pred, &gt, &protocol).map_err(|e| e.to_string())?;
        check(s.n == n, format!("pair {k}: {} vs {n} pixels", s.n))?;
        for i in 0..3 {
            worst = worst.max(rel(s.delta(i + 1), within[i] as f64 / n as f64));
        }
        worst = worst.max(rel(s.rmse(), (se / n as f64).sqrt()));
        pooled.0 += n;
        for i in 0..3 {
            pooled.1[i] += within[i];
        }
        pooled.2 += se;
        samples.push((format!("{k}"), pred, gt));
    }
    let report = evaluate_predictions(&samples, &protocol).map_err(|e| e.to_string())?;
    let n = pooled.0 as f64;
    for (got, want) in [
        (report.delta1, pooled.1[0] as f64 / n),
        (report.delta2, pooled.1[1] as f64 / n),
        (report.delta3, pooled.1[2] as f64 / n),
        (report.rmse, (pooled.2 / n).sqrt()),
    ] {
        worst = worst.max(rel(got, want));
    }
    check(worst <= 1e-9, format!("max relative error {worst:e}"))?;
    Ok(format!("200 pairs, max relative error {worst:e}"))
}

// 2. Median scaling ---------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = seeded_rng(2, "acceptance/median");
    for k in 0..100 {
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let (pred, gt) = random_pair(&mut rng, h, w);
        let pixels: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&p| gt.valid_mask[p] && gt.depths[p] > 0.0)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let lower_median = |m: &DepthMap| {
            let mut v: Vec<f32> = pixels.iter().map(|&p| m.depths[p]).collect();
            v.sort_by(f32::total_cmp);
            v[(v.len() - 1) / 2]
        };
        let scaled = median_scale(&pred, &gt).map_err(|e| e.to_string())?;
        check(
            lower_median(&scaled) == lower_median(&gt),
            format!("map {k}: median {} vs {}", lower_median(&scaled), lower_median(&gt)),
        )?;
        let twice = median_scale(&scaled, &gt).map_err(|e| e.to_string())?;
        check(twice.depths == scaled.depths, format!("map {k}: scaling is not idempotent"))?;
    }
    Ok("100 maps, medians equal and scaling idempotent".into())
}

// 3. Loss algebra -------------------------------------------------------------

fn t64(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
}

fn val(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Largest relative gap between the analytic gradient of `f` at `x` and
/// central differences.
fn fd_gap(x: &[f64], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&t64(x)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let g: Vec<f64> = grads.get(&var).unwrap().to_vec1().unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.to_vec();
        up[i] += eps;
        let mut down = x.to_vec();
        down[i] -= eps;
        let fd = (val(&f(&t64(&up))) - val(&f(&t64(&down)))) / (2.0 * eps);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8));
    }
    worst
}

fn criterion_3() -> Outcome {
    use UpdatePhase::{Discriminator as D, Encoder as E};
    let src = t64(&[1.0, 0.5]);
    let tgt = t64(&[0.0, 0.5]);
    // (1-1)^2, (0.5-1)^2 -> 0.125; 0^2, 0.5^2 -> 0.125.
    check(val(&latent_adversarial_loss(&src, &tgt, D).unwrap()) == 0.25, "latent loss, gamma 1")?;
    // (0-1)^2, (0.5-1)^2 -> 0.625; the source scores play no part.
    check(val(&latent_adversarial_loss(&t64(&[]), &tgt, E).unwrap()) == 0.625, "latent loss, gamma 0")?;
    check(val(&depth_adversarial_loss(&src, &tgt, D).unwrap()) == 0.25, "depth loss, gamma 1")?;
    check(val(&depth_adversarial_loss(&src, &tgt, E).unwrap()) == 0.625, "depth loss, gamma 0")?;
    let a = t64(&[1.0, -2.0, 0.5, 3.0]);
    let b = t64(&[0.0, -1.0, 1.0, 3.0]);
    // |1| + |-1| + |-0.5| + 0 over 4.
    check(val(&consistency_loss(&a, &b, E).unwrap()) == 0.625, "consistency, gamma 0")?;
    check(val(&consistency_loss(&a, &b, D).unwrap()) == 0.0, "consistency gate")?;
    let parts = |phase| {
        combined_adaptation_loss(
            LossPart::new(t64(&[0.25]).sum_all().unwrap(), phase),
            LossPart::new(t64(&[0.5]).sum_all().unwrap(), phase),
            LossPart::new(consistency_loss(&a, &b, phase).unwrap(), phase),
            0.7,
        )
        .unwrap()
        .values()
        .unwrap()
    };
    let e: LossValues = parts(E);
    check(e.total == 0.25 + 0.5 + 0.7 * 0.625, format!("combined gamma 0: {}", e.total))?;
    let d: LossValues = parts(D);
    check(d.total == 0.25 + 0.5 && d.l_reg == 0.0, format!("combined gamma 1: {}", d.total))?;

    // Gradients: the gated regularizer contributes nothing.
    let z = Var::from_tensor(&a).unwrap();
    let g = consistency_loss(&b, z.as_tensor(), D).unwrap().backward().unwrap();
    check(g.get(&z).is_none_or(|t| t.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() == 0.0), "gated gradient")?;

    let mut rng = seeded_rng(3, "acceptance/losses");
    let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };
    let other = sample(6);
    let latents_s = sample(12);
    let latents_t: Vec<f64> = latents_s.iter().zip(sample(12)).map(|(a, d)| a + 0.5 * d.signum() + 0.1 * d).collect();
    let fixed = t64(&other);
    let ls = t64(&latents_s);
    let mut worst: f64 = 0.0;
    for phase in [D, E] {
        worst = worst.max(fd_gap(&sample(6), &|x| latent_adversarial_loss(&fixed, x, phase).unwrap()));
        worst = worst.max(fd_gap(&sample(6), &|x| depth_adversarial_loss(x, &fixed, D).unwrap()));
        worst = worst.max(fd_gap(&sample(6), &|x| depth_adversarial_loss(&fixed, x, phase).unwrap()));
    }
    worst = worst.max(fd_gap(&latents_t, &|x| consistency_loss(&ls, x, E).unwrap()));
    worst = worst.max(fd_gap(&latents_t, &|x| {
        let scores = (x.sum_all().unwrap() * 0.1).unwrap().reshape(1).unwrap();
        combined_adaptation_loss(
            LossPart::new(latent_adversarial_loss(&fixed, &scores, E).unwrap(), E),
            LossPart::new(depth_adversarial_loss(&fixed, &scores.sqr().unwrap(), E).unwrap(), E),
            LossPart::new(consistency_loss(&ls, x, E).unwrap(), E),
            0.7,
        )
        .unwrap()
        .total
    }));
    check(worst < 1e-4, format!("finite-difference gap {worst:e}"))?;
    Ok(format!("hand cases exact, max finite-difference gap {worst:e}"))
}

// 4 and 5. Adaptation invariants --------------------------------------------

const RES: usize = 96;

fn tiny_net(seed: u64) -> DepthNetwork {
    build_depth_network(ArchitectureSpec::new(ArchitectureId::LightweightTiny, RES, RES), &mut seeded_rng(seed, "init"))
        .unwrap()
}

fn paired(n: usize, seed: u64) -> PairedDataset {
    let stream = seeded_rng(seed, "acceptance/paired");
    let items = (0..n)
        .map(|i| {
            let (img, d, _) = render_sample((RES, RES), Shift::None, &mut stream.derive(i), &format!("s{i}")).unwrap();
            (img, d)
        })
        .collect();
    PairedDataset {
        name: "source".into(),
        split: DataSplit::Train,
        max_depth: Some(10.0),
        items,
    }
}

fn unpaired(n: usize, seed: u64) -> UnpairedDataset {
    let stream = seeded_rng(seed, "acceptance/unpaired");
    let items = (0..n)
        .map(|i| render_sample((RES, RES), Shift::Photometric, &mut stream.derive(i), &format!("t{i}")).unwrap().0)
        .collect();
    UnpairedDataset {
        name: "target".into(),
        split: DataSplit::Train,
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
        seed: 4,
        ld_variant: "indoor".into(),
        dd_base_width: 8,
        augment: None,
    }
}

fn fp(p: &ParamMap) -> String {
    p.fingerprint().unwrap()
}

struct Hashes {
    adaptable: String,
    ld: String,
    dd: String,
    frozen: String,
    decoder: String,
    source: String,
}

fn hashes(s: &AdaptationState) -> Hashes {
    Hashes {
        adaptable: fp(&s.network.adaptable_parameters()),
        ld: fp(&s.ld.params),
        dd: fp(&s.dd.params),
        frozen: fp(&s.network.frozen_encoder_parameters()),
        decoder: fp(&s.network.decoder_params),
        source: s.frozen_source.fingerprint().unwrap(),
    }
}

struct Isolation {
    reference: Option<(String, String, String)>,
    before: Option<Hashes>,
    phases: usize,
    violations: Vec<String>,
}

impl AdaptHooks for Isolation {
    fn before_phase(&mut self, s: &AdaptationState, _phase: UpdatePhase) -> depthadapt::Result<()> {
        let h = hashes(s);
        self.reference.get_or_insert((h.frozen.clone(), h.decoder.clone(), h.source.clone()));
        self.before = Some(h);
        Ok(())
    }

    fn after_phase(&mut self, s: &AdaptationState, phase: UpdatePhase, _v: &LossValues) -> depthadapt::Result<()> {
        let b = self.before.take().expect("before_phase ran");
        let a = hashes(s);
        let it = s.iteration;
        let (learners_moved, others_fixed) = match phase {
            UpdatePhase::Discriminator => (a.ld != b.ld && a.dd != b.dd, a.adaptable == b.adaptable),
            UpdatePhase::Encoder => (a.adaptable != b.adaptable, a.ld == b.ld && a.dd == b.dd),
        };
        if !learners_moved {
            self.violations.push(format!("iteration {it} gamma {phase}: learners unchanged"));
        }
        if !others_fixed {
            self.violations.push(format!("iteration {it} gamma {phase}: non-learners changed"));
        }
        let (frozen, decoder, source) = self.reference.as_ref().expect("set");
        if (&a.frozen, &a.decoder, &a.source) != (frozen, decoder, source) {
            self.violations.push(format!("iteration {it} gamma {phase}: frozen part changed"));
        }
        self.phases += 1;
        Ok(())
    }
}

fn criterion_4() -> Outcome {
    let mut probe = Isolation {
        reference: None,
        before: None,
        phases: 0,
        violations: Vec::new(),
    };
    let out = adapt(&tiny_net(4), &paired(100, 4), &unpaired(100, 4), &adapt_cfg(1, 2, 100), None, &mut probe)
        .map_err(|e| e.to_string())?;
    check(out.state.iteration == 50, format!("{} iterations", out.state.iteration))?;
    check(probe.phases == 100, format!("{} phases observed", probe.phases))?;
    check(probe.violations.is_empty(), probe.violations.join("; "))?;
    Ok("50 iterations, 100 phases, all hashes as expected".into())
}

fn flat(p: &ParamMap) -> Vec<f64> {
    p.iter()
        .flat_map(|(_, v)| {
            v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
        })
        .collect()
}

fn deltas(sub: Option<usize>) -> Vec<f64> {
    let pre = tiny_net(5);
    let mut cfg = adapt_cfg(1, 4, 4);
    cfg.optimizer = AdaptOptimizer::Momentum;
    cfg.sub_batch = sub;
    cfg.lr_encoder = 1.0;
    cfg.lr_ld = 1.0;
    cfg.lr_dd = 1.0;
    let init = AdaptationState::new(&pre, &cfg, 10.0).unwrap();
    let before = [flat(&pre.adaptable_parameters()), flat(&init.ld.params), flat(&init.dd.params)].concat();
    let out = adapt(&pre, &paired(4, 5), &unpaired(4, 5), &cfg, None, &mut NoHooks).unwrap();
    let s = &out.state;
    let after = [flat(&s.network.adaptable_parameters()), flat(&s.ld.params), flat(&s.dd.params)].concat();
    after.iter().zip(&before).map(|(x, y)| x - y).collect()
}

fn criterion_5() -> Outcome {
    // With plain gradient steps at unit rate the parameter delta is the
    // accumulated gradient itself.
    let full = deltas(None);
    let split = deltas(Some(2));
    let num: f64 = full.iter().zip(&split).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = full.iter().map(|a| a * a).sum::<f64>().sqrt();
    check(den > 0.0, "no update")?;
    let gap = num / den;
    check(gap <= 1e-5, format!("relative gap {gap:e}"))?;
    Ok(format!("batch 4 vs 2x2, relative gap {gap:e}"))
}

// 6. MACs ---------------------------------------------------------------------

fn graph_macs(net: &DepthNetwork, res: (usize, usize)) -> (u64, u64) {
    let (enc, dec) = network_graphs(net, res).unwrap();
    (count_graph_macs(&enc).unwrap(), count_graph_macs(&dec).unwrap())
}

fn criterion_6() -> Outcome {
    let mut g = LayerGraph::default();
    Conv2d::new("toy", 3, 8, 3).trace(FeatureShape::new(3, 16, 16), &mut g).unwrap();
    let toy = count_graph_macs(&g).unwrap();
    check(toy == 55_296, format!("toy conv: {toy}"))?;

    let mut lines = vec![format!("toy {toy}")];
    for (id, reference) in [(ArchitectureId::Lightweight, 0.76), (ArchitectureId::Complex, 32.25)] {
        let net = build_depth_network(ArchitectureSpec::new(id, 224, 224), &mut seeded_rng(0, "init")).unwrap();
        let g = count_macs(&net, (224, 224)).unwrap();
        check((g - reference).abs() <= 0.2 * reference, format!("{id}: {g:.3} G vs {reference} G"))?;
        lines.push(format!("{id} {g:.3} G"));

        let (enc, dec) = graph_macs(&net, (224, 224));
        let (enc2, dec2) = graph_macs(&net, (448, 448));
        let (enc_w, dec_w) = graph_macs(&net, (224, 448));
        check(enc2 + dec2 == 4 * (enc + dec), format!("{id}: doubling both sides"))?;
        check(enc_w + dec_w == 2 * (enc + dec), format!("{id}: doubling the width"))?;
        let (eg, dg) = network_graphs(&net, (224, 224)).unwrap();
        let per_layer: u64 = eg.layers.iter().chain(&dg.layers).map(|l| layer_macs(&l.name, &l.kind).unwrap()).sum();
        check(per_layer == enc + dec, format!("{id}: layer sum"))?;
        check(((enc + dec) as f64 / 1e9 - g).abs() < 1e-12, format!("{id}: total"))?;
    }
    Ok(lines.join(", ") + "; scaling and additivity exact")
}

// 7. Energy ---------------------------------------------------------------------

/// Midpoint Riemann sum of the piecewise-linear power curve, in Wh.
fn riemann(samples: &[(f64, f64)], (t0, t1): (f64, f64), steps: usize) -> f64 {
    let dt = (t1 - t0) / steps as f64;
    let mut j = 0;
    let mut joules = 0.0;
    for k in 0..steps {
        let t = t0 + (k as f64 + 0.5) * dt;
        while samples[j + 1].0 < t {
            j += 1;
        }
        let ((ta, pa), (tb, pb)) = (samples[j], samples[j + 1]);
        joules += (pa + (pb - pa) * (t - ta) / (tb - ta)) * dt;
    }
    joules / 3600.0
}

fn criterion_7() -> Outcome {
    let rect = PowerLog::new(vec![(0.0, 12.0), (1800.0, 12.0)]).unwrap();
    let (_, wh) = energy_from_power_log(&rect, (0.0, 1800.0)).map_err(|e| e.to_string())?;
    check(wh == 6.0, format!("rectangle: {wh} Wh"))?;
    let tri = PowerLog::new(vec![(0.0, 0.0), (3600.0, 10.0)]).unwrap();
    let (_, wh) = energy_from_power_log(&tri, (0.0, 3600.0)).map_err(|e| e.to_string())?;
    check(wh == 5.0, format!("triangle: {wh} Wh"))?;

    let mut rng = seeded_rng(7, "acceptance/energy");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut t = rng.uniform_range(0.0, 1e6);
        let samples: Vec<(f64, f64)> = (0..2 + rng.below(30))
            .map(|_| {
                t += rng.uniform_range(0.5, 60.0);
                (t, rng.uniform_range(0.0, 40.0))
            })
            .collect();
        let (start, end) = (samples[0].0, samples.last().unwrap().0);
        let a = rng.uniform_range(start, end);
        let b = rng.uniform_range(start, end);
        let window = (a.min(b), a.max(b));
        let log = PowerLog::new(samples.clone()).unwrap();
        let inside = samples.iter().filter(|(t, _)| *t >= window.0 && *t <= window.1).count();
        let got = match energy_from_power_log(&log, window) {
            Ok((_, wh)) => wh,
            Err(_) if inside < 2 => continue,
            Err(e) => return Err(e.to_string()),
        };
        worst = worst.max(rel(got, riemann(&samples, window, 4_000_000)));
    }
    check(worst <= 1e-9, format!("random logs: relative error {worst:e}"))?;
    Ok(format!("6.0 Wh and 5.0 Wh exact, random logs within {worst:e}"))
}

// 8. Toy end-to-end -------------------------------------------------------------

const TOY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn toy_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let data = dir.join("toy");
    let text = format!(
        r#"seed = {seed}

[dataset]
source_root = "{data}/source/train"
source_test_root = "{data}/source/test"
target_root = "{data}/target/train"
target_test_root = "{data}/target/test"

[model]
architecture = "lightweight-tiny"
resolution = [96, 96]

[pretrain]
epochs = 15
batch_size = 8
learning_rate = 0.01

[adapt]
epochs = 25
n = 100
batch_size_per_domain = 4
lr_encoder = 2e-4
lr_ld = 2e-4
lr_dd = 2e-4
dd_base_width = 8

[output]
dir = "{out}"
"#,
        data = data.display(),
        out = dir.join("out").display(),
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

struct ToyRun {
    source_only: f64,
    adapted: f64,
    rmse: f64,
    scaled_rmse: f64,
}

fn toy_run(seed: u64) -> Result<ToyRun, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let err = |e: depthadapt_cli::error::CliError| e.to_string();
    cmd_make_toy_data(&ToyArgs {
        out: tmp.path().join("toy"),
        n_train: 300,
        n_test: 50,
        shift: Shift::Photometric,
        seed,
        resolution: (96, 96),
    })
    .map_err(err)?;
    let cfg = toy_config(tmp.path(), seed);
    let pre = cmd_pretrain(&cfg).map_err(err)?;
    let eval = |ckpt: &Path| {
        cmd_evaluate(
            &cfg,
            &EvaluateArgs {
                checkpoint: ckpt.to_owned(),
                scaling: ScalingChoice::Both,
                split: Split::Target,
                out: None,
            },
        )
        .map(|(_, rows)| rows)
    };
    let before = eval(&pre).map_err(err)?;
    let adapted = cmd_adapt(
        &cfg,
        &AdaptArgs {
            pretrained: pre,
            ..AdaptArgs::default()
        },
    )
    .map_err(err)?;
    let after = eval(&adapted).map_err(err)?;
    Ok(ToyRun {
        source_only: before[0].delta1,
        adapted: after[0].delta1,
        rmse: after[0].rmse,
        scaled_rmse: after[1].rmse,
    })
}

fn criterion_8() -> Outcome {
    let mut gains = 0;
    let mut scaled_better = 0;
    let t = Instant::now();
    for seed in TOY_SEEDS {
        let r = toy_run(seed)?;
        let gain = r.adapted - r.source_only;
        gains += usize::from(gain >= 0.02);
        scaled_better += usize::from(r.scaled_rmse < r.rmse);
        let line = format!(
            "seed {seed}: delta1 {:.4} -> {:.4} ({gain:+.4}), rmse {:.4}, scaled {:.4}",
            r.source_only, r.adapted, r.rmse, r.scaled_rmse
        );
        println!("    {line}");
    }
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let summary = format!(
        "delta1 gain >= 0.02 in {gains}/5 seeds, scaled RMSE lower in {scaled_better}/5, {minutes:.1} min"
    );
    check(gains >= 4 && scaled_better >= 4 && minutes < 30.0, summary.clone())?;
    Ok(summary)
}

// 9. Determinism and resume ---------------------------------------------------

fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = depthadapt(args);
    check(code(&out) == 0, format!("{args:?}: {}", stderr(&out)))
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("toy");
    run_ok(&["make-toy-data", "--out", s(&data), "--n-train", "16", "--n-test", "2", "--resolution", "96x96", "--seed", "9"])?;
    let extra = "";
    let setup = |name: &str| {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = common::write_config(&dir, &data, &dir.join("out"), 96, extra);
        let text = std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("epochs = 1\nbatch_size = 2", "epochs = 2\nbatch_size = 4")
            .replace("epochs = 1\nn = 100", "epochs = 4\nn = 16");
        std::fs::write(&cfg, text).unwrap();
        (cfg, dir.join("out"))
    };
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let epochs = |p: &Path| -> Result<String, String> {
        let text = String::from_utf8(read(p)?).map_err(|e| e.to_string())?;
        Ok(without_columns(&text, &NONDETERMINISTIC_EPOCH_COLUMNS))
    };

    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let (cfg, out) = setup(name);
        run_ok(&["pretrain", "--config", s(&cfg)])?;
        let pre = out.join("pretrain/pretrain.safetensors");
        run_ok(&["adapt", "--config", s(&cfg), "--pretrained", s(&pre)])?;
        outs.push(out);
    }
    let (a, b) = (&outs[0], &outs[1]);
    for f in ["pretrain/pretrain.safetensors", "adapt/adapt.safetensors", "adapt/train_log.csv", "adapt/subsets.json"] {
        check(read(&a.join(f))? == read(&b.join(f))?, format!("rerun differs in {f}"))?;
    }
    for f in ["pretrain/epochs.csv", "adapt/epochs.csv"] {
        check(epochs(&a.join(f))? == epochs(&b.join(f))?, format!("rerun differs in {f}"))?;
    }

    // Interrupt after two of four epochs, then resume.
    let (cfg, out) = setup("c");
    let pre = a.join("pretrain/pretrain.safetensors");
    run_ok(&["adapt", "--config", s(&cfg), "--pretrained", s(&pre), "--stop-after-epoch", "2"])?;
    let resume = out.join("adapt/checkpoints/adapt-epoch002.safetensors");
    run_ok(&["adapt", "--config", s(&cfg), "--pretrained", s(&pre), "--resume", s(&resume)])?;
    for f in ["adapt/adapt.safetensors", "adapt/train_log.csv", "adapt/checkpoints/adapt-epoch004.safetensors"] {
        check(read(&a.join(f))? == read(&out.join(f))?, format!("resumed run differs in {f}"))?;
    }
    check(epochs(&a.join("adapt/epochs.csv"))? == epochs(&out.join("adapt/epochs.csv"))?, "resumed epoch log differs")?;
    Ok("reruns byte-identical, resumed run matches the uninterrupted one".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric oracle equivalence", criterion_1),
        ("median-scaling contract", criterion_2),
        ("loss algebra and gradients", criterion_3),
        ("phase isolation", criterion_4),
        ("gradient accumulation", criterion_5),
        ("MAC accounting", criterion_6),
        ("energy integration", criterion_7),
        ("toy end-to-end adaptation", criterion_8),
        ("determinism and resume", criterion_9),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let k = i + 1;
        if !selected.is_empty() && !selected.contains(&k) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {k} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {k} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
