#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthadapt::checkpoint::CheckpointKind;
use depthadapt::datasets::toy::{make_toy_data, Shift, ToyDataSpec};
use depthadapt::engine::network_checkpoint;
use depthadapt::networks::{build_depth_network, ArchitectureId, ArchitectureSpec};
use depthadapt::rng::seeded_rng;

pub fn depthadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthadapt"))
        .args(args)
        .env("DEPTHADAPT_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn toy(root: &Path, n_train: usize, n_test: usize, res: usize, seed: u64) {
    make_toy_data(
        root,
        &ToyDataSpec {
            n_train,
            n_test,
            shift: Shift::Photometric,
            seed,
            resolution: (res, res),
        },
    )
    .unwrap();
}

/// An experiment file over the toy tree at `data`, writing to `out`.
/// `extra` is appended verbatim.
pub fn write_config(dir: &Path, data: &Path, out: &Path, res: usize, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 7

[dataset]
source_root = "{src}"
source_test_root = "{src_test}"
target_root = "{tgt}"
target_test_root = "{tgt_test}"

[model]
architecture = "lightweight-tiny"
resolution = [{res}, {res}]

[pretrain]
epochs = 1
batch_size = 2
learning_rate = 0.01

[adapt]
epochs = 1
n = 100
batch_size_per_domain = 4
lr_encoder = 2e-4
lr_ld = 2e-4
lr_dd = 2e-4
dd_base_width = 8

[profile]
warmup = 0
timed = 1

[output]
dir = "{out}"
{extra}"#,
        src = data.join("source/train").display(),
        src_test = data.join("source/test").display(),
        tgt = data.join("target/train").display(),
        tgt_test = data.join("target/test").display(),
        out = out.display(),
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// An untrained network saved as a pretrain checkpoint.
pub fn fresh_checkpoint(path: &Path, id: ArchitectureId, res: usize, seed: u64) -> PathBuf {
    let net = build_depth_network(ArchitectureSpec::new(id, res, res), &mut seeded_rng(seed, "init")).unwrap();
    network_checkpoint(&net, CheckpointKind::Pretrain, seed, 0).unwrap().save(path).unwrap();
    path.to_owned()
}

/// CSV text with the named columns removed.
pub fn without_columns(text: &str, drop: &[&str]) -> String {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().unwrap().clone();
    let keep: Vec<usize> = (0..headers.len()).filter(|&i| !drop.contains(&&headers[i])).collect();
    let mut out = keep.iter().map(|&i| headers[i].to_owned()).collect::<Vec<_>>().join(",") + "\n";
    for rec in r.records() {
        let rec = rec.unwrap();
        out += &(keep.iter().map(|&i| rec[i].to_owned()).collect::<Vec<_>>().join(",") + "\n");
    }
    out
}
