//! The subcommands. Each returns the paths it wrote so callers (and tests)
//! can find the artifacts.

use std::path::{Path, PathBuf};

use depthadapt::checkpoint::{Checkpoint, CheckpointKind};
use depthadapt::datasets::toy::{make_toy_data, Shift, ToyDataSpec};
use depthadapt::datasets::{
    load_paired, load_unpaired, sample_subsets, DatasetLayout, PairedDataset, SubsetPair, UnpairedDataset,
};
use depthadapt::engine::{
    adapt, network_checkpoint, network_from_checkpoint, pretrain, resume_adaptation, AdaptHooks, AdaptationState,
    EpochStats,
};
use depthadapt::metrics::{evaluate, evaluate_predictions, prepare_pair, EvalProtocol, MetricsReport};
use depthadapt::networks::build_depth_network;
use depthadapt::resources::{
    count_macs, energy_from_power_log, mean, measure_inference, peak_memory_bytes, seconds_to_minutes, PowerLog,
    ResourceReport,
};
use depthadapt::rng::seeded_rng;

use crate::config::{require_path, ExperimentConfig};
use crate::error::CliError;
use crate::logs::{
    parse_csv, parse_epoch_log, parse_iteration_log, read_text, to_csv, write_text, EpochRow, MetricsRow, ProfileRow,
};

pub const PRETRAIN_DIR: &str = "pretrain";
pub const ADAPT_DIR: &str = "adapt";
pub const FINAL_PRETRAIN: &str = "pretrain.safetensors";
pub const FINAL_ADAPT: &str = "adapt.safetensors";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const SUBSETS: &str = "subsets.json";
pub const EVAL_BATCH: usize = 16;

fn layout_for(root: &Path, layout: Option<&Path>) -> Result<DatasetLayout, CliError> {
    match layout {
        Some(p) => {
            require_path(p, "layout manifest")?;
            Ok(DatasetLayout::parse(&read_text(p)?)?)
        }
        None => Ok(DatasetLayout::from_root(root)?),
    }
}

fn paired(root: &Path, layout: Option<&Path>, what: &str) -> Result<PairedDataset, CliError> {
    require_path(root, what)?;
    Ok(load_paired(root, &layout_for(root, layout)?)?)
}

fn unpaired(root: &Path, layout: Option<&Path>, what: &str) -> Result<UnpairedDataset, CliError> {
    require_path(root, what)?;
    Ok(load_unpaired(root, &layout_for(root, layout)?)?)
}

fn progress(stage: &str, total: usize, s: &EpochStats) {
    let mem = s
        .peak_mem_bytes
        .map(|b| format!("{:.1} MiB", b as f64 / (1024.0 * 1024.0)))
        .unwrap_or_else(|| "n/a".into());
    if stage == "pretrain" {
        println!(
            "{stage} epoch {}/{total} loss {:.5} {:.1}s peak {mem}",
            s.epoch, s.mean_loss, s.seconds
        );
    } else {
        println!(
            "{stage} epoch {}/{total} l_ld {:.5} l_dd {:.5} l_reg {:.5} total {:.5} {:.1}s peak {mem}{}",
            s.epoch,
            s.mean_l_ld,
            s.mean_l_dd,
            s.mean_l_reg,
            s.mean_loss,
            s.seconds,
            if s.mode_collapse_warning { " [mode collapse warning]" } else { "" }
        );
    }
}

/// Supervised training on the source domain. Returns the final checkpoint.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let pcfg = cfg.pretrain_config()?;
    let spec = cfg.spec()?;
    let d = &cfg.dataset;
    let source = paired(&d.source_root, d.source_layout.as_deref(), "source dataset root")?;
    cfg.write_effective()?;
    let out = cfg.output.dir.join(PRETRAIN_DIR);
    let net = build_depth_network(spec, &mut seeded_rng(cfg.seed, "init"))?;
    let mut rows = Vec::new();
    let outcome = pretrain(&net, &source, pcfg, Some(&out.join("checkpoints")), &mut |s| {
        progress("pretrain", pcfg.epochs, s);
        rows.push(EpochRow::from(s));
    })?;
    debug_assert_eq!(outcome.epochs.len(), rows.len());
    write_text(&out.join(EPOCH_LOG), &to_csv(&rows)?)?;
    let path = out.join(FINAL_PRETRAIN);
    network_checkpoint(&net, CheckpointKind::Pretrain, cfg.seed, pcfg.epochs as u64)?.save(&path)?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require_path(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

fn check_architecture(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let m = &ckpt.manifest;
    let mut diff = Vec::new();
    if m.architecture != cfg.model.architecture {
        diff.push(format!(
            "architecture: checkpoint `{}`, config `{}`",
            m.architecture, cfg.model.architecture
        ));
    }
    if m.resolution != cfg.model.resolution {
        diff.push(format!(
            "resolution: checkpoint {:?}, config {:?}",
            m.resolution, cfg.model.resolution
        ));
    }
    if diff.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "checkpoint does not match the config:\n  {}",
            diff.join("\n  ")
        )))
    }
}

struct CliHooks {
    total: usize,
    stop_after: Option<u64>,
    rows: Vec<EpochRow>,
}

impl AdaptHooks for CliHooks {
    fn after_epoch(&mut self, _state: &AdaptationState, stats: &EpochStats) -> depthadapt::Result<bool> {
        progress("adapt", self.total, stats);
        self.rows.push(EpochRow::from(stats));
        Ok(self.stop_after.is_none_or(|k| stats.epoch < k))
    }
}

/// Options of `adapt` besides the config.
#[derive(Clone, Debug, Default)]
pub struct AdaptArgs {
    pub pretrained: PathBuf,
    /// Continue from this adaptation checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the run stays resumable).
    pub stop_after_epoch: Option<u64>,
}

/// Samples the subset pair, adapts and writes logs and checkpoints.
pub fn cmd_adapt(cfg: &ExperimentConfig, args: &AdaptArgs) -> Result<PathBuf, CliError> {
    let acfg = cfg.adapt_config()?;
    let pretrained = load_checkpoint(&args.pretrained)?;
    if pretrained.manifest.kind != CheckpointKind::Pretrain {
        return Err(CliError::Config(format!(
            "{} is a {:?} checkpoint, expected a pretrain checkpoint",
            args.pretrained.display(),
            pretrained.manifest.kind
        )));
    }
    check_architecture(&pretrained, cfg)?;
    let d = &cfg.dataset;
    let source = paired(&d.source_root, d.source_layout.as_deref(), "source dataset root")?;
    let target_root = d
        .target_root
        .as_deref()
        .ok_or_else(|| CliError::Config("dataset.target_root is required for adapt".into()))?;
    let target = unpaired(target_root, d.target_layout.as_deref(), "target dataset root")?;
    cfg.write_effective()?;
    let out = cfg.output.dir.join(ADAPT_DIR);

    let subsets = sample_subsets(&source, &target, acfg.n, &mut seeded_rng(cfg.seed, "subsets"))?;
    let json = serde_json::to_string_pretty(&subsets).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&out.join(SUBSETS), &(json + "\n"))?;
    let a = PairedDataset {
        items: subsets.source_subset.iter().map(|&i| source.items[i].clone()).collect(),
        ..source.clone()
    };
    let b = UnpairedDataset {
        items: subsets.target_subset.iter().map(|&i| target.items[i].clone()).collect(),
        ..target.clone()
    };

    let ckpt_dir = out.join("checkpoints");
    let mut hooks = CliHooks {
        total: acfg.epochs,
        stop_after: args.stop_after_epoch,
        rows: Vec::new(),
    };
    let (outcome, mut log, mut epochs) = match &args.resume {
        None => {
            let net = network_from_checkpoint(&pretrained)?;
            (adapt(&net, &a, &b, acfg, Some(&ckpt_dir), &mut hooks)?, Vec::new(), Vec::new())
        }
        Some(resume) => {
            let manifest = load_checkpoint(resume)?.manifest;
            // Keep the log rows written before the checkpoint.
            let log_path = out.join(TRAIN_LOG);
            let epoch_path = out.join(EPOCH_LOG);
            let log = if log_path.exists() { parse_iteration_log(&read_text(&log_path)?)? } else { Vec::new() };
            let epochs = if epoch_path.exists() { parse_epoch_log(&read_text(&epoch_path)?)? } else { Vec::new() };
            let log = log.into_iter().filter(|r| r.iteration < manifest.iteration).collect();
            let epochs = epochs.into_iter().filter(|r| r.epoch <= manifest.epoch).collect();
            (resume_adaptation(resume, &a, &b, acfg, Some(&ckpt_dir), &mut hooks)?, log, epochs)
        }
    };
    log.extend(outcome.log.iter().copied());
    epochs.extend(hooks.rows);
    write_text(&out.join(TRAIN_LOG), &to_csv(&log)?)?;
    write_text(&out.join(EPOCH_LOG), &to_csv(&epochs)?)?;
    let path = out.join(FINAL_ADAPT);
    outcome.state.to_checkpoint(acfg)?.save(&path)?;
    println!("wrote {}", path.display());
    Ok(path)
}

/// Which protocol rows `evaluate` emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingChoice {
    /// Whatever `eval.median_scaling` says.
    Config,
    On,
    Off,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub scaling: ScalingChoice,
    pub split: Split,
    /// Defaults to `<output>/metrics-<checkpoint stem>.csv`.
    pub out: Option<PathBuf>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn protocols(cfg: &ExperimentConfig, scaling: ScalingChoice) -> Vec<EvalProtocol> {
    let with = |on: bool| EvalProtocol {
        median_scaling: on,
        ..cfg.eval.clone()
    };
    match scaling {
        ScalingChoice::Config => vec![cfg.eval.clone()],
        ScalingChoice::On => vec![with(true)],
        ScalingChoice::Off => vec![with(false)],
        ScalingChoice::Both => vec![with(false), with(true)],
    }
}

/// Scores a checkpoint on a test split; one CSV row per protocol.
pub fn cmd_evaluate(cfg: &ExperimentConfig, args: &EvaluateArgs) -> Result<(PathBuf, Vec<MetricsRow>), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let d = &cfg.dataset;
    let (root, layout) = match args.split {
        Split::Target => (&d.target_test_root, &d.target_layout),
        Split::Source => (&d.source_test_root, &d.source_layout),
    };
    let root = root
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("dataset.{}_test_root is required for evaluate", args.split.as_str())))?;
    let test = paired(root, layout.as_deref(), "test dataset root")?;
    if test.is_empty() {
        return Err(CliError::Data(format!("test split {} is empty", root.display())));
    }
    let res = (ckpt.manifest.resolution[0], ckpt.manifest.resolution[1]);
    let evaluate_one = |protocol: &EvalProtocol| -> Result<MetricsReport, CliError> {
        Ok(match ckpt.manifest.kind {
            CheckpointKind::Oracle => {
                let samples = test
                    .items
                    .iter()
                    .map(|(img, gt)| {
                        let (_, gt) = prepare_pair(img, gt, res)?;
                        Ok((img.source_id.clone(), gt.clone(), gt))
                    })
                    .collect::<depthadapt::Result<Vec<_>>>()?;
                evaluate_predictions(&samples, protocol)?
            }
            CheckpointKind::Diagnostic => {
                return Err(CliError::Data("diagnostic checkpoints cannot be evaluated".into()))
            }
            CheckpointKind::Pretrain | CheckpointKind::Adapt => {
                let net = network_from_checkpoint(&ckpt)?;
                evaluate(&net, &test, protocol, EVAL_BATCH)?
            }
        })
    };
    let n = ckpt.manifest.settings.get("n").and_then(|v| v.parse().ok());
    let name = stem(&args.checkpoint);
    let mut rows = Vec::new();
    for protocol in protocols(cfg, args.scaling) {
        let report = evaluate_one(&protocol)?;
        rows.push(MetricsRow::new(&name, &ckpt.manifest.architecture, args.split.as_str(), n, &report));
    }
    let text = to_csv(&rows)?;
    print!("{text}");
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join(format!("metrics-{name}.csv")));
    write_text(&path, &text)?;
    Ok((path, rows))
}

#[derive(Clone, Debug)]
pub struct ProfileArgs {
    pub checkpoint: PathBuf,
    pub power_log: Option<PathBuf>,
    /// Epoch log giving the training windows; defaults to the adaptation
    /// run's `epochs.csv` under the output directory.
    pub training_log: Option<PathBuf>,
    /// Defaults to `<output>/profile-<checkpoint stem>.csv`.
    pub out: Option<PathBuf>,
}

/// MACs, latency and memory of a checkpoint, plus energy per training epoch
/// when a power log is given.
pub fn cmd_profile(cfg: &ExperimentConfig, args: &ProfileArgs) -> Result<(PathBuf, ProfileRow), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if !matches!(ckpt.manifest.kind, CheckpointKind::Pretrain | CheckpointKind::Adapt) {
        return Err(CliError::Data(format!(
            "cannot profile a {:?} checkpoint",
            ckpt.manifest.kind
        )));
    }
    let net = network_from_checkpoint(&ckpt)?;
    let res = net.spec().input_resolution;
    let mut report = ResourceReport {
        macs_g: count_macs(&net, res)?,
        infer_ms: Some(measure_inference(&net, cfg.profile.warmup, cfg.profile.timed)?),
        ..ResourceReport::default()
    };
    let log_path = args
        .training_log
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join(ADAPT_DIR).join(EPOCH_LOG));
    let epochs = if log_path.exists() {
        parse_epoch_log(&read_text(&log_path)?)?
    } else if args.training_log.is_some() || args.power_log.is_some() {
        return Err(CliError::Config(format!("training log `{}` does not exist", log_path.display())));
    } else {
        Vec::new()
    };
    report.train_min_per_epoch = mean(&epochs.iter().map(|e| e.seconds).collect::<Vec<_>>()).map(seconds_to_minutes);
    report.peak_mem_bytes = epochs
        .iter()
        .filter_map(|e| e.peak_mem_bytes)
        .max()
        .or_else(peak_memory_bytes);
    if let Some(p) = &args.power_log {
        require_path(p, "power log")?;
        let log = PowerLog::parse(&read_text(p)?)?;
        if epochs.is_empty() {
            return Err(CliError::Data(format!("training log `{}` has no epochs", log_path.display())));
        }
        let mut energies = Vec::new();
        let mut peak = f64::NEG_INFINITY;
        for e in &epochs {
            let (pk, wh) = energy_from_power_log(&log, (e.start_unix, e.end_unix))
                .map_err(|err| CliError::from(err.in_sample(format!("epoch {}", e.epoch))))?;
            peak = peak.max(pk);
            energies.push(wh);
        }
        report.peak_power_w = Some(peak);
        report.energy_wh_per_epoch = mean(&energies);
    }
    let name = stem(&args.checkpoint);
    let row = ProfileRow::new(&name, &ckpt.manifest.architecture, res, &report);
    let text = to_csv(std::slice::from_ref(&row))?;
    print!("{text}");
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join(format!("profile-{name}.csv")));
    write_text(&path, &text)?;
    Ok((path, row))
}

#[derive(Clone, Debug)]
pub struct ToyArgs {
    pub out: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub shift: Shift,
    pub seed: u64,
    pub resolution: (usize, usize),
}

pub fn cmd_make_toy_data(args: &ToyArgs) -> Result<PathBuf, CliError> {
    make_toy_data(
        &args.out,
        &ToyDataSpec {
            n_train: args.n_train,
            n_test: args.n_test,
            shift: args.shift,
            seed: args.seed,
            resolution: args.resolution,
        },
    )?;
    println!(
        "wrote {} source pairs, {} target images and {} test pairs per domain under {}",
        args.n_train,
        args.n_train,
        args.n_test,
        args.out.display()
    );
    Ok(args.out.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    /// Fixed-width text with metric and resource columns side by side.
    Table,
}

/// One line of the combined report: metric columns then resource columns.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ReportRow {
    pub checkpoint: String,
    pub architecture: String,
    pub split: String,
    pub n: Option<usize>,
    pub median_scaling: bool,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub macs_g: Option<f64>,
    pub train_min_per_epoch: Option<f64>,
    pub infer_ms: Option<f64>,
    pub peak_power_w: Option<f64>,
    pub energy_wh_per_epoch: Option<f64>,
}

fn csv_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, CliError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(prefix))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Joins every `metrics-*.csv` with the matching `profile-*.csv`.
pub fn cmd_report(cfg: &ExperimentConfig, format: ReportFormat) -> Result<(PathBuf, Vec<ReportRow>), CliError> {
    let dir = &cfg.output.dir;
    let mut metrics: Vec<MetricsRow> = Vec::new();
    for f in csv_files(dir, "metrics-")? {
        metrics.extend(parse_csv::<MetricsRow>(&read_text(&f)?)?);
    }
    let mut profiles: Vec<ProfileRow> = Vec::new();
    for f in csv_files(dir, "profile-")? {
        profiles.extend(parse_csv::<ProfileRow>(&read_text(&f)?)?);
    }
    if metrics.is_empty() {
        return Err(CliError::Data(format!("no metrics-*.csv files under {}", dir.display())));
    }
    let rows: Vec<ReportRow> = metrics
        .into_iter()
        .map(|m| {
            let p = profiles.iter().find(|p| p.checkpoint == m.checkpoint);
            ReportRow {
                macs_g: p.map(|p| p.macs_g),
                train_min_per_epoch: p.and_then(|p| p.train_min_per_epoch),
                infer_ms: p.and_then(|p| p.infer_ms),
                peak_power_w: p.and_then(|p| p.peak_power_w),
                energy_wh_per_epoch: p.and_then(|p| p.energy_wh_per_epoch),
                checkpoint: m.checkpoint,
                architecture: m.architecture,
                split: m.split,
                n: m.n,
                median_scaling: m.median_scaling,
                delta1: m.delta1,
                delta2: m.delta2,
                delta3: m.delta3,
                rmse: m.rmse,
            }
        })
        .collect();
    let (text, name) = match format {
        ReportFormat::Csv => (to_csv(&rows)?, "report.csv"),
        ReportFormat::Table => (table(&rows), "report.txt"),
    };
    print!("{text}");
    let path = dir.join(name);
    write_text(&path, &text)?;
    Ok((path, rows))
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn table(rows: &[ReportRow]) -> String {
    let header = [
        "checkpoint", "arch", "split", "n", "scaled", "d1", "d2", "d3", "rmse", "GMACs", "min/epoch", "ms",
        "peak W", "Wh/epoch",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.checkpoint.clone(),
                r.architecture.clone(),
                r.split.clone(),
                r.n.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
                if r.median_scaling { "yes" } else { "no" }.into(),
                format!("{:.3}", r.delta1),
                format!("{:.3}", r.delta2),
                format!("{:.3}", r.delta3),
                format!("{:.3}", r.rmse),
                opt(r.macs_g, 3),
                opt(r.train_min_per_epoch, 2),
                opt(r.infer_ms, 2),
                opt(r.peak_power_w, 1),
                opt(r.energy_wh_per_epoch, 3),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<String>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            + "\n"
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    for r in body {
        out += &line(r);
    }
    out
}

/// Subset record written by `adapt`.
pub fn read_subsets(path: &Path) -> Result<SubsetPair, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
