//! Image and depth value types, plus their conversion to and from NCHW tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// An RGB image with intensities in `[0, 1]`, stored row-major as `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub source_id: String,
}

impl ImageSample {
    pub fn new(pixels: Array3<f32>, source_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "image must be HxWx3 with H, W > 0, got {h}x{w}x{c}"
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!(
                "image intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

/// Metric depth in meters with an explicit ground-truth validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub depths: Array2<f32>,
    pub valid_mask: Array2<bool>,
    pub max_depth: Option<f32>,
}

impl DepthMap {
    pub fn new(depths: Array2<f32>, valid_mask: Array2<bool>) -> Result<Self> {
        if depths.dim() != valid_mask.dim() {
            return Err(Error::Shape(format!(
                "depth {:?} and mask {:?} disagree",
                depths.dim(),
                valid_mask.dim()
            )));
        }
        let (h, w) = depths.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape("depth map must be nonempty".into()));
        }
        for (d, m) in depths.iter().zip(valid_mask.iter()) {
            if *m && !(*d >= 0.0 && d.is_finite()) {
                return Err(Error::Argument(format!("invalid depth {d} on a valid pixel")));
            }
        }
        Ok(Self {
            depths,
            valid_mask,
            max_depth: None,
        })
    }

    /// A fully valid map, for predictions.
    pub fn dense(depths: Array2<f32>) -> Self {
        let valid_mask = Array2::from_elem(depths.dim(), true);
        Self {
            depths,
            valid_mask,
            max_depth: None,
        }
    }

    pub fn height(&self) -> usize {
        self.depths.dim().0
    }

    pub fn width(&self) -> usize {
        self.depths.dim().1
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.depths.dim()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|m| **m).count()
    }

    /// Clamps every depth to `max_depth` and records the bound.
    pub fn clipped(&self, max_depth: f32) -> Self {
        let bound = self.max_depth.map_or(max_depth, |m| m.min(max_depth));
        Self {
            depths: self.depths.mapv(|d| d.min(bound)),
            valid_mask: self.valid_mask.clone(),
            max_depth: Some(bound),
        }
    }
}

pub fn images_to_tensor(images: &[&ImageSample], device: &Device, dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Argument("empty image batch".into()));
    };
    let (h, w) = first.resolution();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.resolution() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes resolutions {:?} and {:?}",
                (h, w),
                img.resolution()
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels.index_axis(Axis(2), c).iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Depth values and validity (as 0/1) as two `B x 1 x H x W` tensors.
pub fn depths_to_tensors(
    depths: &[&DepthMap],
    device: &Device,
    dtype: DType,
) -> Result<(Tensor, Tensor)> {
    let Some(first) = depths.first() else {
        return Err(Error::Argument("empty depth batch".into()));
    };
    let (h, w) = first.resolution();
    let mut values = Vec::with_capacity(depths.len() * h * w);
    let mut mask = Vec::with_capacity(depths.len() * h * w);
    for d in depths {
        if d.resolution() != (h, w) {
            return Err(Error::Shape("batch mixes depth resolutions".into()));
        }
        values.extend(d.depths.iter().copied());
        mask.extend(d.valid_mask.iter().map(|m| if *m { 1f32 } else { 0f32 }));
    }
    let shape = (depths.len(), 1, h, w);
    Ok((
        Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?,
        Tensor::from_vec(mask, shape, device)?.to_dtype(dtype)?,
    ))
}

/// Splits a `B x 1 x H x W` prediction tensor into dense depth maps.
pub fn tensor_to_depths(t: &Tensor) -> Result<Vec<DepthMap>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected one depth channel, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks_exact(h * w)
        .take(b)
        .map(|chunk| {
            DepthMap::dense(Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size"))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn image_rejects_out_of_range() {
        let px = Array3::from_elem((2, 2, 3), 1.5f32);
        assert!(ImageSample::new(px, "x").is_err());
        assert!(ImageSample::new(Array3::zeros((0, 2, 3)), "x").is_err());
    }

    #[test]
    fn tensor_layout_is_nchw() {
        let mut px = Array3::zeros((2, 3, 3));
        px[[1, 2, 0]] = 0.25;
        px[[0, 1, 2]] = 0.75;
        let img = ImageSample::new(px, "a").unwrap();
        let t = images_to_tensor(&[&img], &Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        let flat: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(flat[1 * 3 + 2], 0.25); // channel 0, row 1, col 2
        assert_eq!(flat[2 * 6 + 1], 0.75); // channel 2, row 0, col 1
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent(values in proptest::collection::vec(0f32..200.0, 16), bound in 1f32..100.0) {
            let map = DepthMap::dense(Array2::from_shape_vec((4, 4), values).unwrap());
            let once = map.clipped(bound);
            let twice = once.clipped(bound);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.depths.iter().all(|d| *d <= bound));
        }
    }
}
