//! Toy source-to-target experiment: render a photometrically shifted domain
//! pair, pretrain on the source, adapt with n = 100 and compare target
//! metrics before and after.
//!
//! ```text
//! cargo run --release -p depthadapt --example toy_adaptation -- [seed]
//! ```
//! Knobs are read from `TOY_*` environment variables.

use std::time::Instant;

use depthadapt::datasets::toy::{make_toy_data, Shift, ToyDataSpec};
use depthadapt::datasets::{load_paired, load_unpaired, sample_subsets, DatasetLayout, PairedDataset, UnpairedDataset};
use depthadapt::engine::{adapt, pretrain, AdaptConfig, AdaptOptimizer, NoHooks, PretrainConfig};
use depthadapt::metrics::{evaluate, EvalProtocol};
use depthadapt::networks::{build_depth_network, ArchitectureId, ArchitectureSpec};
use depthadapt::rng::seeded_rng;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> depthadapt::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let n_train = env("TOY_N_TRAIN", 300usize);
    let n = env("TOY_N", 100usize);
    let dir = tempfile_dir(seed);
    let t0 = Instant::now();
    make_toy_data(
        &dir,
        &ToyDataSpec {
            n_train,
            n_test: env("TOY_N_TEST", 50),
            shift: Shift::Photometric,
            seed,
            resolution: (96, 96),
        },
    )?;
    let load = |p: &str| -> depthadapt::Result<PairedDataset> {
        let root = dir.join(p);
        load_paired(&root, &DatasetLayout::from_root(&root)?)
    };
    let src = load("source/train")?;
    let tgt_test = load("target/test")?;
    let src_test = load("source/test")?;
    let root = dir.join("target/train");
    let tgt: UnpairedDataset = load_unpaired(&root, &DatasetLayout::from_root(&root)?)?;
    println!("data {:.1}s", t0.elapsed().as_secs_f64());

    let spec = ArchitectureSpec::new(ArchitectureId::LightweightTiny, 96, 96);
    let net = build_depth_network(spec, &mut seeded_rng(seed, "init"))?;
    let pcfg = PretrainConfig {
        epochs: env("TOY_PRE_EPOCHS", 20),
        batch_size: env("TOY_PRE_BATCH", 8),
        learning_rate: env("TOY_PRE_LR", 0.01),
        momentum: 0.9,
        sub_batch: None,
        augment: None,
        seed,
    };
    let t = Instant::now();
    pretrain(&net, &src, &pcfg, None, &mut |s| {
        println!("pretrain epoch {} loss {:.4} ({:.1}s)", s.epoch, s.mean_loss, s.seconds)
    })?;
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());

    let plain = EvalProtocol::default();
    let scaled = EvalProtocol {
        median_scaling: true,
        ..EvalProtocol::default()
    };
    let before = evaluate(&net, &tgt_test, &plain, 16)?;
    let before_src = evaluate(&net, &src_test, &plain, 16)?;
    let before_s = evaluate(&net, &tgt_test, &scaled, 16)?;
    println!(
        "source-only: src d1 {:.4} | tgt d1 {:.4} rmse {:.4} | scaled d1 {:.4} rmse {:.4}",
        before_src.delta1, before.delta1, before.rmse, before_s.delta1, before_s.rmse
    );

    let subsets = sample_subsets(&src, &tgt, n, &mut seeded_rng(seed, "subsets"))?;
    let a = PairedDataset {
        items: subsets.source_subset.iter().map(|&i| src.items[i].clone()).collect(),
        ..src.clone()
    };
    let b = UnpairedDataset {
        items: subsets.target_subset.iter().map(|&i| tgt.items[i].clone()).collect(),
        ..tgt.clone()
    };
    let lr = env("TOY_LR", 2e-4);
    let acfg = AdaptConfig {
        epochs: env("TOY_EPOCHS", 25),
        batch_size_per_domain: env("TOY_BATCH", 4),
        sub_batch: None,
        lambda_reg: env("TOY_LAMBDA", 0.7),
        lr_encoder: lr,
        lr_ld: lr,
        lr_dd: lr,
        optimizer: AdaptOptimizer::Adam,
        n,
        seed,
        ld_variant: "indoor".into(),
        dd_base_width: 8,
        augment: None,
    };
    let t = Instant::now();
    let every = env("TOY_EVAL_EVERY", 0u64);
    struct Probe<'a> {
        every: u64,
        test: &'a PairedDataset,
    }
    impl depthadapt::engine::AdaptHooks for Probe<'_> {
        fn after_epoch(
            &mut self,
            state: &depthadapt::engine::AdaptationState,
            stats: &depthadapt::engine::EpochStats,
        ) -> depthadapt::Result<bool> {
            let m = if self.every > 0 && stats.epoch % self.every == 0 {
                let r = evaluate(&state.network, self.test, &EvalProtocol::default(), 16)?;
                format!(" tgt d1 {:.4} rmse {:.4}", r.delta1, r.rmse)
            } else {
                String::new()
            };
            println!(
                "adapt epoch {} ld {:.4} dd {:.4} reg {:.4} ({:.1}s){m}",
                stats.epoch, stats.mean_l_ld, stats.mean_l_dd, stats.mean_l_reg, stats.seconds
            );
            Ok(true)
        }
    }
    let _ = NoHooks;
    let out = adapt(&net, &a, &b, &acfg, None, &mut Probe { every, test: &tgt_test })?;
    println!("adapt {:.1}s", t.elapsed().as_secs_f64());
    let after = evaluate(&out.state.network, &tgt_test, &plain, 16)?;
    let after_s = evaluate(&out.state.network, &tgt_test, &scaled, 16)?;
    println!(
        "adapted: tgt d1 {:.4} rmse {:.4} | scaled d1 {:.4} rmse {:.4}",
        after.delta1, after.rmse, after_s.delta1, after_s.rmse
    );
    println!(
        "RESULT seed {seed} gain {:+.4} scaled_rmse_lower {}",
        after.delta1 - before.delta1,
        after_s.rmse < after.rmse
    );
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}

fn tempfile_dir(seed: u64) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("toy-adaptation-{seed}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}
