//! Threshold accuracies, RMSE and median scaling over masked depth maps.
//!
//! A pixel is evaluated when its ground truth is valid and positive. Both maps
//! are floored at `min_depth_floor` before the ratio test. Sums run in f64.

use serde::{Deserialize, Serialize};

use crate::datasets::{augment, AugmentConfig, PairedDataset};
use crate::error::{Error, Result};
use crate::networks::DepthNetwork;
use crate::rng::seeded_rng;
use crate::types::{DepthMap, ImageSample};

pub const DEFAULT_MIN_DEPTH_FLOOR: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    #[serde(default)]
    pub max_depth: Option<f32>,
    #[serde(default)]
    pub median_scaling: bool,
    #[serde(default = "default_floor")]
    pub min_depth_floor: f32,
    /// Average per-image metrics instead of pooling pixels.
    #[serde(default)]
    pub per_image_average: bool,
    /// Optional evaluation window as fractions `[top, bottom, left, right]`
    /// of the image; pixels outside are ignored.
    #[serde(default)]
    pub crop: Option<[f32; 4]>,
}

fn default_floor() -> f32 {
    DEFAULT_MIN_DEPTH_FLOOR
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            max_depth: None,
            median_scaling: false,
            min_depth_floor: DEFAULT_MIN_DEPTH_FLOOR,
            per_image_average: false,
            crop: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth_floor > 0.0 && self.min_depth_floor.is_finite()) {
            return Err(Error::Config(format!(
                "min_depth_floor must be positive, got {}",
                self.min_depth_floor
            )));
        }
        if let Some(m) = self.max_depth {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("max_depth must be positive, got {m}")));
            }
        }
        if let Some([t, b, l, r]) = self.crop {
            if !(0.0 <= t && t < b && b <= 1.0 && 0.0 <= l && l < r && r <= 1.0) {
                return Err(Error::Config(format!("invalid evaluation crop {:?}", self.crop)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub n_pixels: usize,
    pub protocol: EvalProtocol,
}

/// Running sums over evaluated pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelStats {
    pub n: usize,
    pub within: [usize; 3],
    pub squared_error: f64,
}

impl PixelStats {
    pub fn merge(&mut self, other: &PixelStats) {
        self.n += other.n;
        for i in 0..3 {
            self.within[i] += other.within[i];
        }
        self.squared_error += other.squared_error;
    }

    pub fn delta(&self, i: usize) -> f64 {
        self.within[i - 1] as f64 / self.n as f64
    }

    pub fn rmse(&self) -> f64 {
        (self.squared_error / self.n as f64).sqrt()
    }
}

fn check_shapes(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.resolution() != gt.resolution() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} disagree",
            pred.resolution(),
            gt.resolution()
        )));
    }
    Ok(())
}

/// Indices of evaluated pixels in row-major order.
fn evaluated(gt: &DepthMap, crop: Option<[f32; 4]>) -> Vec<(usize, usize)> {
    let (h, w) = gt.resolution();
    let (y0, y1, x0, x1) = match crop {
        Some([t, b, l, r]) => (
            (t * h as f32) as usize,
            (b * h as f32) as usize,
            (l * w as f32) as usize,
            (r * w as f32) as usize,
        ),
        None => (0, h, 0, w),
    };
    gt.depths
        .indexed_iter()
        .filter(|((y, x), d)| {
            *y >= y0 && *y < y1 && *x >= x0 && *x < x1 && gt.valid_mask[[*y, *x]] && **d > 0.0
        })
        .map(|(p, _)| p)
        .collect()
}

pub fn pixel_stats(pred: &DepthMap, gt: &DepthMap, protocol: &EvalProtocol) -> Result<PixelStats> {
    check_shapes(pred, gt)?;
    let floor = protocol.min_depth_floor as f64;
    let thresholds = [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)];
    let mut s = PixelStats::default();
    for p in evaluated(gt, protocol.crop) {
        let g = (gt.depths[p] as f64).max(floor);
        let q = (pred.depths[p] as f64).max(floor);
        let ratio = (q / g).max(g / q);
        for (i, t) in thresholds.iter().enumerate() {
            if ratio < *t {
                s.within[i] += 1;
            }
        }
        let e = pred.depths[p] as f64 - gt.depths[p] as f64;
        s.squared_error += e * e;
        s.n += 1;
    }
    if s.n == 0 {
        return Err(Error::EmptyEvaluation("ground truth has no valid positive pixels".into()));
    }
    Ok(s)
}

/// Fraction of evaluated pixels with `max(pred/gt, gt/pred) < 1.25^i`.
pub fn delta_accuracy(pred: &DepthMap, gt: &DepthMap, i: usize, floor: f32) -> Result<f64> {
    if !(1..=3).contains(&i) {
        return Err(Error::Argument(format!("delta index must be 1, 2 or 3, got {i}")));
    }
    let protocol = EvalProtocol {
        min_depth_floor: floor,
        ..EvalProtocol::default()
    };
    Ok(pixel_stats(pred, gt, &protocol)?.delta(i))
}

pub fn rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    Ok(pixel_stats(pred, gt, &EvalProtocol::default())?.rmse())
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &mut [f32]) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let k = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(k, f32::total_cmp);
    Some(*m)
}

fn median_at(map: &DepthMap, pixels: &[(usize, usize)]) -> Option<f32> {
    let mut v: Vec<f32> = pixels.iter().map(|p| map.depths[*p]).collect();
    lower_median(&mut v)
}

/// Multiplies `pred` by `median(gt) / median(pred)`, both medians taken over
/// the pixels `gt` evaluates. The ratio is applied in f64, so the scaled
/// prediction's median equals the ground-truth median exactly.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMap> {
    check_shapes(pred, gt)?;
    let pixels = evaluated(gt, None);
    let g = median_at(gt, &pixels)
        .ok_or_else(|| Error::EmptyEvaluation("ground truth has no valid positive pixels".into()))?;
    let p = median_at(pred, &pixels).unwrap_or(0.0);
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::Degenerate(format!("prediction median is {p}")));
    }
    let scale = g as f64 / p as f64;
    Ok(DepthMap {
        depths: pred.depths.mapv(|d| (d as f64 * scale) as f32),
        valid_mask: pred.valid_mask.clone(),
        max_depth: pred.max_depth,
    })
}

/// Metrics for predictions against ground truth, sample by sample.
pub fn evaluate_predictions(
    samples: &[(String, DepthMap, DepthMap)],
    protocol: &EvalProtocol,
) -> Result<MetricsReport> {
    protocol.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let mut pooled = PixelStats::default();
    let mut per_image = [0f64; 4];
    for (id, pred, gt) in samples {
        let wrap = |e: Error| e.in_sample(id.clone());
        let (mut pred, gt) = match protocol.max_depth {
            Some(m) => (pred.clipped(m), gt.clipped(m)),
            None => (pred.clone(), gt.clone()),
        };
        if protocol.median_scaling {
            pred = median_scale(&pred, &gt).map_err(wrap)?;
        }
        let s = pixel_stats(&pred, &gt, protocol).map_err(wrap)?;
        pooled.merge(&s);
        for i in 0..3 {
            per_image[i] += s.delta(i + 1);
        }
        per_image[3] += s.rmse();
    }
    let (d1, d2, d3, r) = if protocol.per_image_average {
        let n = samples.len() as f64;
        (per_image[0] / n, per_image[1] / n, per_image[2] / n, per_image[3] / n)
    } else {
        (pooled.delta(1), pooled.delta(2), pooled.delta(3), pooled.rmse())
    };
    Ok(MetricsReport {
        delta1: d1,
        delta2: d2,
        delta3: d3,
        rmse: r,
        n_pixels: pooled.n,
        protocol: protocol.clone(),
    })
}

/// Brings a test pair to `resolution` (bilinear image, nearest depth).
pub fn prepare_pair(
    image: &ImageSample,
    depth: &DepthMap,
    resolution: (usize, usize),
) -> Result<(ImageSample, DepthMap)> {
    if image.resolution() == resolution {
        return Ok((image.clone(), depth.clone()));
    }
    let cfg = AugmentConfig::resize_only(resolution.0, resolution.1);
    let (i, d) = augment(image, Some(depth), &cfg, &mut seeded_rng(0, "resize"))?;
    Ok((i, d.expect("depth passed through")))
}

/// Predicts every test sample with `net` (eval mode) and scores it.
pub fn evaluate(
    net: &DepthNetwork,
    test_set: &PairedDataset,
    protocol: &EvalProtocol,
    batch_size: usize,
) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::Dataset(format!("test set `{}` is empty", test_set.name)));
    }
    let resolution = net.spec().input_resolution;
    let mut samples = Vec::with_capacity(test_set.len());
    for chunk in test_set.items.chunks(batch_size.max(1)) {
        let prepared = chunk
            .iter()
            .map(|(i, d)| prepare_pair(i, d, resolution).map_err(|e| e.in_sample(i.source_id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&ImageSample> = prepared.iter().map(|(i, _)| i).collect();
        let preds = net.predict(&images)?;
        for ((img, gt), pred) in prepared.iter().zip(preds) {
            samples.push((img.source_id.clone(), pred, gt.clone()));
        }
    }
    evaluate_predictions(&samples, protocol)
}
