//! Augmentation chain: color jitter, rotation, scaling, center crop, resize.
//!
//! Geometric steps use bilinear sampling for images and nearest sampling for
//! depth (so depth values are never blended across object boundaries).
//! Pixel centers sit at half-integer coordinates.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::types::{DepthMap, ImageSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - s, 1 + s]`.
    #[serde(default)]
    pub jitter_strength: f32,
    #[serde(default)]
    pub rotation_degrees_max: f32,
    #[serde(default = "unit_scale")]
    pub scale_range: [f32; 2],
    /// `[height, width]` of the center crop; no crop when absent.
    #[serde(default)]
    pub crop_size: Option<[usize; 2]>,
    pub output_resolution: [usize; 2],
    /// Divide depth by the spatial scale factor.
    #[serde(default)]
    pub scale_adjusts_depth: bool,
}

fn unit_scale() -> [f32; 2] {
    [1.0, 1.0]
}

impl AugmentConfig {
    pub fn resize_only(height: usize, width: usize) -> Self {
        Self {
            enabled: false,
            jitter_strength: 0.0,
            rotation_degrees_max: 0.0,
            scale_range: unit_scale(),
            crop_size: None,
            output_resolution: [height, width],
            scale_adjusts_depth: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.output_resolution;
        if h == 0 || w == 0 {
            return Err(Error::Config("augmentation output resolution must be positive".into()));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 2.0) {
            return Err(Error::Config(format!(
                "scale_range must satisfy 0 < lo <= hi <= 2, got [{lo}, {hi}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!(
                "jitter_strength must lie in [0, 1], got {}",
                self.jitter_strength
            )));
        }
        if !(self.rotation_degrees_max >= 0.0 && self.rotation_degrees_max.is_finite()) {
            return Err(Error::Config("rotation_degrees_max must be nonnegative".into()));
        }
        if let Some([ch, cw]) = self.crop_size {
            if ch == 0 || cw == 0 {
                return Err(Error::Config("crop_size must be positive".into()));
            }
        }
        Ok(())
    }
}

fn bilinear(img: &Array3<f32>, y: f32, x: f32, c: usize) -> f32 {
    let (h, w, _) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
    let bottom = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples through `map(out_y, out_x) -> (src_y, src_x)` in pixel-center
/// coordinates. Sources outside the image give black pixels and invalid depth.
fn warp(
    image: &Array3<f32>,
    depth: Option<&DepthMap>,
    out: (usize, usize),
    map: impl Fn(f32, f32) -> (f32, f32),
) -> (Array3<f32>, Option<DepthMap>) {
    let (h, w, _) = image.dim();
    let mut img = Array3::zeros((out.0, out.1, 3));
    let mut dep = depth.map(|_| (Array2::zeros(out), Array2::from_elem(out, false)));
    for oy in 0..out.0 {
        for ox in 0..out.1 {
            let (sy, sx) = map(oy as f32 + 0.5, ox as f32 + 0.5);
            if !(sy >= 0.0 && sy <= h as f32 && sx >= 0.0 && sx <= w as f32) {
                continue;
            }
            for c in 0..3 {
                img[[oy, ox, c]] = bilinear(image, sy - 0.5, sx - 0.5, c);
            }
            if let (Some(src), Some((d, m))) = (depth, dep.as_mut()) {
                let ny = (sy.floor() as usize).min(h - 1);
                let nx = (sx.floor() as usize).min(w - 1);
                d[[oy, ox]] = src.depths[[ny, nx]];
                m[[oy, ox]] = src.valid_mask[[ny, nx]];
            }
        }
    }
    let dep = dep.map(|(d, m)| DepthMap {
        depths: d,
        valid_mask: m,
        max_depth: depth.and_then(|d| d.max_depth),
    });
    (img, dep)
}

fn resize(
    image: &Array3<f32>,
    depth: Option<&DepthMap>,
    out: (usize, usize),
) -> (Array3<f32>, Option<DepthMap>) {
    let (h, w, _) = image.dim();
    let sy = h as f32 / out.0 as f32;
    let sx = w as f32 / out.1 as f32;
    warp(image, depth, out, |y, x| (y * sy, x * sx))
}

fn jitter(image: &mut Array3<f32>, strength: f32, rng: &mut RngHandle) {
    let s = strength as f64;
    let brightness = rng.uniform_range(1.0 - s, 1.0 + s) as f32;
    let contrast = rng.uniform_range(1.0 - s, 1.0 + s) as f32;
    let saturation = rng.uniform_range(1.0 - s, 1.0 + s) as f32;
    let (h, w, _) = image.dim();
    let mean = image.iter().sum::<f32>() / image.len() as f32 * brightness;
    for y in 0..h {
        for x in 0..w {
            let mut px = [0f32; 3];
            for (c, v) in px.iter_mut().enumerate() {
                *v = image[[y, x, c]] * brightness;
            }
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for (c, v) in px.iter().enumerate() {
                let sat = gray + (v - gray) * saturation;
                image[[y, x, c]] = (mean + (sat - mean) * contrast).clamp(0.0, 1.0);
            }
        }
    }
}

/// Applies the chain to an image and optionally its depth map. A disabled
/// configuration only resizes.
pub fn augment(
    image: &ImageSample,
    depth: Option<&DepthMap>,
    cfg: &AugmentConfig,
    rng: &mut RngHandle,
) -> Result<(ImageSample, Option<DepthMap>)> {
    cfg.validate()?;
    if let Some(d) = depth {
        if d.resolution() != image.resolution() {
            return Err(Error::Shape(format!(
                "image {:?} and depth {:?} disagree",
                image.resolution(),
                d.resolution()
            )));
        }
    }
    let out = (cfg.output_resolution[0], cfg.output_resolution[1]);
    let (img, dep) = if !cfg.enabled {
        resize(&image.pixels, depth, out)
    } else {
        let mut pixels = image.pixels.clone();
        if cfg.jitter_strength > 0.0 {
            jitter(&mut pixels, cfg.jitter_strength, rng);
        }
        let max = cfg.rotation_degrees_max as f64;
        let angle = rng.uniform_range(-max, max).to_radians() as f32;
        let [lo, hi] = cfg.scale_range;
        let scale = rng.uniform_range(lo as f64, hi as f64) as f32;

        let (h, w, _) = pixels.dim();
        let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
        let (sin, cos) = angle.sin_cos();
        let (mut img, mut dep) = if angle != 0.0 {
            warp(&pixels, depth, (h, w), |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
            })
        } else {
            (pixels, depth.cloned())
        };

        if scale != 1.0 {
            let sh = ((h as f32 * scale).round() as usize).max(1);
            let sw = ((w as f32 * scale).round() as usize).max(1);
            let (i, mut d) = resize(&img, dep.as_ref(), (sh, sw));
            if cfg.scale_adjusts_depth {
                if let Some(d) = d.as_mut() {
                    d.depths.mapv_inplace(|v| v / scale);
                }
            }
            img = i;
            dep = d;
        }

        if let Some([ch, cw]) = cfg.crop_size {
            let (h, w, _) = img.dim();
            if ch > h || cw > w {
                return Err(Error::Config(format!(
                    "crop {ch}x{cw} larger than the {h}x{w} image after scaling"
                )));
            }
            let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
            img = img
                .slice(ndarray::s![oy..oy + ch, ox..ox + cw, ..])
                .to_owned();
            dep = dep.map(|d| DepthMap {
                depths: d.depths.slice(ndarray::s![oy..oy + ch, ox..ox + cw]).to_owned(),
                valid_mask: d.valid_mask.slice(ndarray::s![oy..oy + ch, ox..ox + cw]).to_owned(),
                max_depth: d.max_depth,
            });
        }
        resize(&img, dep.as_ref(), out)
    };
    let image = ImageSample::new(img.mapv(|v| v.clamp(0.0, 1.0)), image.source_id.clone())?;
    Ok((image, dep))
}
