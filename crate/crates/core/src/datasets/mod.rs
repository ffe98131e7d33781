//! Dataset ingestion, adaptation subsets and augmentation.
//!
//! Every dataset root carries a `dataset.toml` layout file:
//!
//! ```toml
//! image_glob = "images/*.png"
//! depth_glob = "depth/*.png"      # omit for unlabelled data
//! depth_scale_to_meters = 0.001   # 16-bit depth units to meters
//! max_depth_m = 10.0
//! split = "train"                 # or "test"
//! ```
//!
//! Globs are relative to the root. Images and depth maps are paired by file
//! stem. Depth is read from 16-bit grayscale PNG; zero marks missing ground
//! truth.

pub mod augment;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::types::{DepthMap, ImageSample};

pub use augment::{augment, AugmentConfig};

pub const LAYOUT_FILE: &str = "dataset.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLayout {
    pub image_glob: String,
    #[serde(default)]
    pub depth_glob: Option<String>,
    #[serde(default = "default_scale")]
    pub depth_scale_to_meters: f64,
    #[serde(default)]
    pub max_depth_m: Option<f64>,
    #[serde(default)]
    pub split: Split,
}

fn default_scale() -> f64 {
    0.001
}

impl DatasetLayout {
    pub fn parse(text: &str) -> Result<Self> {
        let layout: DatasetLayout =
            toml::from_str(text).map_err(|e| Error::Config(format!("dataset layout: {e}")))?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_glob.trim().is_empty() {
            return Err(Error::Config("dataset layout: empty image_glob".into()));
        }
        if !(self.depth_scale_to_meters.is_finite() && self.depth_scale_to_meters > 0.0) {
            return Err(Error::Config(format!(
                "dataset layout: depth_scale_to_meters must be positive, got {}",
                self.depth_scale_to_meters
            )));
        }
        if let Some(m) = self.max_depth_m {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Config(format!("dataset layout: max_depth_m must be positive, got {m}")));
            }
        }
        Ok(())
    }

    pub fn from_root(root: &Path) -> Result<Self> {
        let path = root.join(LAYOUT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub name: String,
    pub split: Split,
    pub max_depth: Option<f32>,
    pub items: Vec<(ImageSample, DepthMap)>,
}

#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    pub name: String,
    pub split: Split,
    pub items: Vec<ImageSample>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl UnpairedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn dataset_name(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn expand(root: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let full = root.join(pattern);
    let full = full.to_string_lossy();
    let paths = glob::glob(&full).map_err(|e| Error::Config(format!("bad glob `{pattern}`: {e}")))?;
    let mut out = Vec::new();
    for p in paths {
        out.push(p.map_err(|e| Error::io(e.path().to_path_buf(), std::io::Error::other(e.to_string())))?);
    }
    out.sort();
    Ok(out)
}

fn ingestion(frame: &str, message: impl Into<String>) -> Error {
    Error::Ingestion {
        frame: frame.to_owned(),
        message: message.into(),
    }
}

/// Reads an 8- or 16-bit PNG as RGB in `[0, 1]`.
pub fn read_image(path: &Path, source_id: &str) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| ingestion(source_id, format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), data)
        .map_err(|e| ingestion(source_id, e.to_string()))?;
    ImageSample::new(pixels, source_id)
}

/// Decodes a 16-bit grayscale PNG into meters; zero pixels are invalid.
pub fn decode_depth_png(bytes: &[u8], scale_to_meters: f64, frame: &str) -> Result<DepthMap> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ingestion(frame, format!("depth: {e}")))?;
    let luma = match img {
        image::DynamicImage::ImageLuma16(l) => l,
        other => {
            return Err(ingestion(
                frame,
                format!("depth must be 16-bit grayscale, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = luma.dimensions();
    let raw = luma.into_raw();
    let depths: Vec<f32> = raw.iter().map(|v| (*v as f64 * scale_to_meters) as f32).collect();
    let mask: Vec<bool> = raw.iter().map(|v| *v > 0).collect();
    let shape = (h as usize, w as usize);
    DepthMap::new(
        Array2::from_shape_vec(shape, depths).expect("depth shape"),
        Array2::from_shape_vec(shape, mask).expect("mask shape"),
    )
    .map_err(|e| ingestion(frame, e.to_string()))
}

/// Encodes meters as 16-bit PNG units; invalid pixels become zero.
pub fn encode_depth_png(depth: &DepthMap, scale_to_meters: f64) -> Result<Vec<u8>> {
    let (h, w) = depth.resolution();
    let raw: Vec<u16> = depth
        .depths
        .iter()
        .zip(depth.valid_mask.iter())
        .map(|(d, m)| {
            if *m {
                ((*d as f64 / scale_to_meters).round()).clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    image::DynamicImage::ImageLuma16(buf)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Dataset(format!("cannot encode depth: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_image(image: &ImageSample, path: &Path) -> Result<()> {
    let (h, w) = image.resolution();
    let raw: Vec<u8> = image
        .pixels
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn load_paired(root: &Path, layout: &DatasetLayout) -> Result<PairedDataset> {
    layout.validate()?;
    let depth_glob = layout
        .depth_glob
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{}: paired dataset needs depth_glob", root.display())))?;
    let images = expand(root, &layout.image_glob)?;
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no images match `{}` under {}",
            layout.image_glob,
            root.display()
        )));
    }
    let depths: BTreeMap<String, PathBuf> = expand(root, depth_glob)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let name = dataset_name(root);
    let mut items = Vec::with_capacity(images.len());
    for path in images {
        let frame = stem(&path);
        let id = format!("{name}/{frame}");
        let depth_path = depths
            .get(&frame)
            .ok_or_else(|| ingestion(&id, "no depth file with a matching name"))?;
        let image = read_image(&path, &id)?;
        let bytes = std::fs::read(depth_path).map_err(|e| Error::io(depth_path, e))?;
        let mut depth = decode_depth_png(&bytes, layout.depth_scale_to_meters, &id)?;
        if depth.resolution() != image.resolution() {
            return Err(ingestion(
                &id,
                format!(
                    "image is {:?} but depth is {:?}",
                    image.resolution(),
                    depth.resolution()
                ),
            ));
        }
        depth.max_depth = layout.max_depth_m.map(|m| m as f32);
        items.push((image, depth));
    }
    Ok(PairedDataset {
        name,
        split: layout.split,
        max_depth: layout.max_depth_m.map(|m| m as f32),
        items,
    })
}

pub fn load_unpaired(root: &Path, layout: &DatasetLayout) -> Result<UnpairedDataset> {
    layout.validate()?;
    let images = expand(root, &layout.image_glob)?;
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no images match `{}` under {}",
            layout.image_glob,
            root.display()
        )));
    }
    let name = dataset_name(root);
    let items = images
        .iter()
        .map(|p| read_image(p, &format!("{name}/{}", stem(p))))
        .collect::<Result<Vec<_>>>()?;
    Ok(UnpairedDataset {
        name,
        split: layout.split,
        items,
    })
}

/// Equal-size index subsets of a source and a target dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPair {
    pub source_subset: Vec<usize>,
    pub target_subset: Vec<usize>,
    pub size: usize,
    pub seed: u64,
}

/// Draws `n` indices without replacement from each dataset, source first.
pub fn sample_subsets(
    source: &PairedDataset,
    target: &UnpairedDataset,
    n: usize,
    rng: &mut RngHandle,
) -> Result<SubsetPair> {
    sample_subset_indices(
        (&source.name, source.len()),
        (&target.name, target.len()),
        n,
        rng,
    )
}

pub fn sample_subset_indices(
    source: (&str, usize),
    target: (&str, usize),
    n: usize,
    rng: &mut RngHandle,
) -> Result<SubsetPair> {
    if n == 0 {
        return Err(Error::Config("subset size must be positive".into()));
    }
    for (name, len) in [source, target] {
        if n > len {
            return Err(Error::SubsetSize {
                dataset: name.to_owned(),
                requested: n,
                available: len,
            });
        }
    }
    let source_subset = rng.sample_indices(source.1, n);
    let target_subset = rng.sample_indices(target.1, n);
    Ok(SubsetPair {
        source_subset,
        target_subset,
        size: n,
        seed: rng.seed(),
    })
}
