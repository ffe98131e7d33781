//! Resource accounting: analytic MAC counts, timing, peak memory and energy
//! from externally recorded power logs.
//!
//! Power log format: one `unix_seconds<TAB>watts` pair per line, timestamps
//! strictly increasing. Blank lines and lines starting with `#` are skipped.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::networks::DepthNetwork;
use crate::nn::{LayerGraph, LayerKind, Mode};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResourceReport {
    pub macs_g: f64,
    pub train_min_per_epoch: Option<f64>,
    pub infer_ms: Option<f64>,
    pub peak_mem_bytes: Option<u64>,
    pub peak_power_w: Option<f64>,
    pub energy_wh_per_epoch: Option<f64>,
}

/// MACs of one layer; zero for layers without multiply-accumulates.
pub fn layer_macs(name: &str, kind: &LayerKind) -> Result<u64> {
    Ok(match kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            groups,
            output,
        } => {
            (*in_channels as u64 * *out_channels as u64 * kernel.0 as u64 * kernel.1 as u64
                * output.0 as u64
                * output.1 as u64)
                / *groups as u64
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => *in_features as u64 * *out_features as u64,
        LayerKind::BatchNorm
        | LayerKind::Activation
        | LayerKind::Upsample
        | LayerKind::Add
        | LayerKind::Pool
        | LayerKind::Dropout
        | LayerKind::Flatten => 0,
        LayerKind::Other(k) => {
            return Err(Error::Accounting {
                layer: name.to_owned(),
                kind: k.clone(),
            })
        }
    })
}

pub fn count_graph_macs(graph: &LayerGraph) -> Result<u64> {
    graph
        .layers
        .iter()
        .map(|l| layer_macs(&l.name, &l.kind))
        .sum()
}

/// Encoder and decoder graphs of `net` traced at `resolution`.
pub fn network_graphs(net: &DepthNetwork, resolution: (usize, usize)) -> Result<(LayerGraph, LayerGraph)> {
    let (enc, latent) = net.trace_encoder(resolution)?;
    let dec = net.trace_decoder(latent)?;
    Ok((enc, dec))
}

/// MACs of one forward pass, in units of 10^9.
pub fn count_macs(net: &DepthNetwork, resolution: (usize, usize)) -> Result<f64> {
    let (enc, dec) = network_graphs(net, resolution)?;
    Ok((count_graph_macs(&enc)? + count_graph_macs(&dec)?) as f64 / 1e9)
}

pub fn seconds_to_minutes(seconds: f64) -> f64 {
    seconds / 60.0
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Lower median.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Wall-clock stopwatch on the monotonic clock.
#[derive(Clone, Copy, Debug)]
pub struct EpochTimer {
    start: Instant,
}

impl EpochTimer {
    pub fn start() -> Self {
        Self { start: Instant::now() }
    }

    pub fn elapsed_seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Median single-frame latency in milliseconds after `n_warmup` discarded
/// passes.
pub fn measure_inference(net: &DepthNetwork, n_warmup: usize, n_timed: usize) -> Result<f64> {
    if n_timed == 0 {
        return Err(Error::Argument("n_timed must be at least 1".into()));
    }
    let (h, w) = net.spec().input_resolution;
    let x = candle_core::Tensor::zeros((1, 3, h, w), net.dtype(), net.device())?;
    for _ in 0..n_warmup {
        net.forward_depth(&x, Mode::Eval)?;
    }
    let mut times = Vec::with_capacity(n_timed);
    for _ in 0..n_timed {
        let t = Instant::now();
        net.forward_depth(&x, Mode::Eval)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&times).expect("n_timed >= 1"))
}

/// Peak resident set size of this process (Linux `VmHWM`).
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerLog {
    pub samples: Vec<(f64, f64)>,
}

impl PowerLog {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        for (i, (t, p)) in samples.iter().enumerate() {
            if !t.is_finite() || !p.is_finite() || *p < 0.0 {
                return Err(Error::PowerLog {
                    line: i + 1,
                    message: format!("invalid sample ({t}, {p})"),
                });
            }
            if i > 0 && *t <= samples[i - 1].0 {
                return Err(Error::PowerLog {
                    line: i + 1,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::PowerLog { line: i + 1, message };
            let mut fields = line.split('\t');
            let (Some(t), Some(p), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(err("expected `seconds<TAB>watts`".into()));
            };
            let t: f64 = t.trim().parse().map_err(|e| err(format!("timestamp: {e}")))?;
            let p: f64 = p.trim().parse().map_err(|e| err(format!("power: {e}")))?;
            if !t.is_finite() || !p.is_finite() || p < 0.0 {
                return Err(err(format!("invalid sample ({t}, {p})")));
            }
            if samples.last().is_some_and(|(prev, _)| t <= *prev) {
                return Err(err("timestamps must be strictly increasing".into()));
            }
            samples.push((t, p));
        }
        Ok(Self { samples })
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.0, self.samples.last()?.0))
    }

    /// Power at `t` by linear interpolation between neighbouring samples.
    pub fn power_at(&self, t: f64) -> Option<f64> {
        let i = self.samples.partition_point(|(s, _)| *s < t);
        let (t1, p1) = *self.samples.get(i)?;
        if t1 == t {
            return Some(p1);
        }
        let (t0, p0) = *self.samples.get(i.checked_sub(1)?)?;
        Some(p0 + (p1 - p0) * (t - t0) / (t1 - t0))
    }
}

/// Peak power over the samples inside `[t0, t1]` and the trapezoidal energy
/// in watt-hours, interpolating the log at the window ends.
pub fn energy_from_power_log(log: &PowerLog, window: (f64, f64)) -> Result<(f64, f64)> {
    let (t0, t1) = window;
    let (start, end) = log
        .span()
        .ok_or_else(|| Error::InsufficientData("empty power log".into()))?;
    if !(t0 <= t1 && t0 >= start && t1 <= end) {
        return Err(Error::Range { t0, t1, start, end });
    }
    let inside: Vec<(f64, f64)> = log
        .samples
        .iter()
        .copied()
        .filter(|(t, _)| *t >= t0 && *t <= t1)
        .collect();
    if inside.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} power samples inside [{t0}, {t1}], need at least 2",
            inside.len()
        )));
    }
    let peak = inside.iter().map(|(_, p)| *p).fold(f64::NEG_INFINITY, f64::max);
    let mut knots = Vec::with_capacity(inside.len() + 2);
    if inside[0].0 > t0 {
        knots.push((t0, log.power_at(t0).expect("inside span")));
    }
    knots.extend(inside.iter().copied());
    if knots.last().expect("nonempty").0 < t1 {
        knots.push((t1, log.power_at(t1).expect("inside span")));
    }
    let joules: f64 = knots
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok((peak, joules / 3600.0))
}
