//! CSV artifacts: training logs, metrics rows and resource rows.
//!
//! Floats are written with Rust's shortest round-trip formatting, so the
//! files of two identical runs are byte-identical. The epoch log columns
//! `seconds`, `start_unix`, `end_unix` and `peak_mem_bytes` are wall-clock
//! measurements and differ between runs.

use std::io::Write;
use std::path::Path;

use depthadapt::engine::{EpochStats, IterationLog};
use depthadapt::metrics::MetricsReport;
use depthadapt::resources::ResourceReport;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const NONDETERMINISTIC_EPOCH_COLUMNS: [&str; 4] = ["seconds", "start_unix", "end_unix", "peak_mem_bytes"];

/// One row of `epochs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub iterations: u64,
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

impl From<&EpochStats> for EpochRow {
    fn from(s: &EpochStats) -> Self {
        Self {
            epoch: s.epoch,
            iterations: s.iterations,
            mean_loss: s.mean_loss,
            mean_l_ld: s.mean_l_ld,
            mean_l_dd: s.mean_l_dd,
            mean_l_reg: s.mean_l_reg,
            mode_collapse_warning: s.mode_collapse_warning,
            seconds: s.seconds,
            start_unix: s.start_unix,
            end_unix: s.end_unix,
            peak_mem_bytes: s.peak_mem_bytes,
        }
    }
}

/// One row of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub checkpoint: String,
    pub architecture: String,
    pub split: String,
    pub n: Option<usize>,
    pub median_scaling: bool,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub n_pixels: usize,
}

impl MetricsRow {
    pub fn new(checkpoint: &str, architecture: &str, split: &str, n: Option<usize>, r: &MetricsReport) -> Self {
        Self {
            checkpoint: checkpoint.to_owned(),
            architecture: architecture.to_owned(),
            split: split.to_owned(),
            n,
            median_scaling: r.protocol.median_scaling,
            delta1: r.delta1,
            delta2: r.delta2,
            delta3: r.delta3,
            rmse: r.rmse,
            n_pixels: r.n_pixels,
        }
    }
}

/// One row of `profile.csv`. Timing and power columns are measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub checkpoint: String,
    pub architecture: String,
    pub resolution: String,
    pub macs_g: f64,
    pub train_min_per_epoch: Option<f64>,
    pub infer_ms: Option<f64>,
    pub peak_mem_bytes: Option<u64>,
    pub peak_power_w: Option<f64>,
    pub energy_wh_per_epoch: Option<f64>,
}

impl ProfileRow {
    pub fn new(checkpoint: &str, architecture: &str, resolution: (usize, usize), r: &ResourceReport) -> Self {
        Self {
            checkpoint: checkpoint.to_owned(),
            architecture: architecture.to_owned(),
            resolution: format!("{}x{}", resolution.0, resolution.1),
            macs_g: r.macs_g,
            train_min_per_epoch: r.train_min_per_epoch,
            infer_ms: r.infer_ms,
            peak_mem_bytes: r.peak_mem_bytes,
            peak_power_w: r.peak_power_w,
            energy_wh_per_epoch: r.energy_wh_per_epoch,
        }
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

/// Parses an iteration log (`train_log.csv` of an adaptation run).
pub fn parse_iteration_log(text: &str) -> Result<Vec<IterationLog>, CliError> {
    let rows: Vec<IterationLog> = parse_csv(text)?;
    // Each iteration logs the discriminator phase (1) before the encoder phase (0).
    let key = |r: &IterationLog| (r.iteration, 1 - r.phase);
    for (i, r) in rows.iter().enumerate() {
        if r.phase > 1 {
            return Err(CliError::Data(format!("iteration {}: phase must be 0 or 1, got {}", r.iteration, r.phase)));
        }
        if i > 0 && key(r) <= key(&rows[i - 1]) {
            return Err(CliError::Data(format!(
                "iteration log out of order at iteration {} phase {}",
                r.iteration, r.phase
            )));
        }
    }
    Ok(rows)
}

/// Parses an epoch log; epochs must be strictly increasing and every
/// window must satisfy `start_unix <= end_unix`.
pub fn parse_epoch_log(text: &str) -> Result<Vec<EpochRow>, CliError> {
    let rows: Vec<EpochRow> = parse_csv(text)?;
    for (i, r) in rows.iter().enumerate() {
        if !(r.start_unix.is_finite() && r.end_unix.is_finite() && r.start_unix <= r.end_unix) {
            return Err(CliError::Data(format!("epoch {}: invalid time window", r.epoch)));
        }
        if i > 0 && r.epoch <= rows[i - 1].epoch {
            return Err(CliError::Data(format!("epoch log out of order at epoch {}", r.epoch)));
        }
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
