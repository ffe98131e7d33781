//! Procedural toy scenes with analytic depth.
//!
//! A pinhole camera looks at a ground plane that ends in a back wall.
//! Rectangles and ellipses stand on the floor at random depths; their image
//! size and vertical position follow from perspective, and their shading
//! fades towards a fog color with distance. The target domain applies a fixed
//! color transform and blur to freshly drawn scenes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};

use crate::datasets::{encode_depth_png, write_image, DatasetLayout, Split, LAYOUT_FILE};
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, RngHandle};
use crate::types::{DepthMap, ImageSample};

pub const TOY_MAX_DEPTH: f32 = 10.0;
pub const TOY_DEPTH_SCALE: f64 = 0.001;
const CAMERA_HEIGHT: f32 = 1.5;
const FOG_DISTANCE: f32 = 7.0;
const FOG_COLOR: [f32; 3] = [0.75, 0.78, 0.82];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shift {
    None,
    Photometric,
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shift::None => "none",
            Shift::Photometric => "photometric",
        })
    }
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Shift::None),
            "photometric" => Ok(Shift::Photometric),
            other => Err(Error::Config(format!(
                "unknown shift `{other}` (expected none or photometric)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyObject {
    pub shape: Shape,
    /// Pixel coordinates of the center.
    pub center: (f32, f32),
    /// Half extents in pixels.
    pub half_size: (f32, f32),
    pub depth: f32,
    pub color: [f32; 3],
}

impl ToyObject {
    pub fn covers(&self, y: f32, x: f32) -> bool {
        let dy = (y - self.center.0) / self.half_size.0;
        let dx = (x - self.center.1) / self.half_size.1;
        match self.shape {
            Shape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub resolution: (usize, usize),
    pub focal: f32,
    pub horizon: f32,
    pub wall_depth: f32,
    pub wall_color: [f32; 3],
    pub floor_colors: [[f32; 3]; 2],
    /// Distance over which the fog transmittance falls by a factor e.
    pub fog_distance: f32,
    /// Ordered far to near; later objects occlude earlier ones.
    pub objects: Vec<ToyObject>,
}

fn color(rng: &mut RngHandle, lo: f64, hi: f64) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.uniform_range(lo, hi) as f32)
}

impl ToyScene {
    pub fn random(resolution: (usize, usize), rng: &mut RngHandle) -> Self {
        let (h, w) = (resolution.0 as f32, resolution.1 as f32);
        let focal = w;
        let horizon = rng.uniform_range(0.3, 0.45) as f32 * h;
        let wall_depth = rng.uniform_range(6.0, 9.5) as f32;
        let n = 2 + rng.below(4);
        let mut objects: Vec<ToyObject> = (0..n)
            .map(|_| {
                let depth = rng.uniform_range(1.5, (wall_depth - 0.5) as f64) as f32;
                let world_h = rng.uniform_range(0.5, 1.8) as f32;
                let world_w = rng.uniform_range(0.3, 1.2) as f32;
                let bottom = horizon + CAMERA_HEIGHT * focal / depth;
                let half_h = world_h * focal / depth / 2.0;
                let half_w = world_w * focal / depth / 2.0;
                ToyObject {
                    shape: if rng.bernoulli(0.5) { Shape::Rectangle } else { Shape::Ellipse },
                    center: (bottom - half_h, rng.uniform_range(0.0, w as f64) as f32),
                    half_size: (half_h, half_w),
                    depth,
                    color: color(rng, 0.05, 0.95),
                }
            })
            .collect();
        objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        Self {
            resolution,
            focal,
            horizon,
            wall_depth,
            wall_color: color(rng, 0.3, 0.7),
            floor_colors: [color(rng, 0.1, 0.5), color(rng, 0.5, 0.9)],
            fog_distance: FOG_DISTANCE,
            objects,
        }
    }

    /// Depth of the background (floor or wall) at a pixel center.
    pub fn background_depth(&self, y: f32) -> f32 {
        if y <= self.horizon {
            return self.wall_depth;
        }
        (CAMERA_HEIGHT * self.focal / (y - self.horizon)).min(self.wall_depth)
    }

    /// Image and metric depth, sampled at pixel centers.
    pub fn render(&self) -> (Array3<f32>, Array2<f32>) {
        let (h, w) = self.resolution;
        let mut img = Array3::zeros((h, w, 3));
        let mut depth = Array2::zeros((h, w));
        for yi in 0..h {
            for xi in 0..w {
                let (y, x) = (yi as f32 + 0.5, xi as f32 + 0.5);
                let mut d = self.background_depth(y);
                let mut albedo = if d < self.wall_depth {
                    // Checkerboard floor with 1 m tiles.
                    let lateral = (x - w as f32 / 2.0) * d / self.focal;
                    let tile = (lateral.floor() as i64 + d.floor() as i64).rem_euclid(2) as usize;
                    self.floor_colors[tile]
                } else {
                    self.wall_color
                };
                for obj in &self.objects {
                    if obj.covers(y, x) {
                        d = obj.depth;
                        albedo = obj.color;
                    }
                }
                let t = (-d / self.fog_distance).exp();
                for c in 0..3 {
                    img[[yi, xi, c]] = (albedo[c] * t + FOG_COLOR[c] * (1.0 - t)).clamp(0.0, 1.0);
                }
                depth[[yi, xi]] = d.min(TOY_MAX_DEPTH);
            }
        }
        (img, depth)
    }
}

/// The fixed target-domain transform: channel mixing, gamma and a 3x3
/// binomial blur.
pub fn photometric_shift(img: &Array3<f32>) -> Array3<f32> {
    const MIX: [[f32; 3]; 3] = [[0.15, 0.25, 0.6], [0.55, 0.35, 0.1], [0.3, 0.6, 0.1]];
    let (h, w, _) = img.dim();
    let mut mixed = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for (c, row) in MIX.iter().enumerate() {
                let v: f32 = (0..3).map(|k| row[k] * img[[y, x, k]]).sum();
                mixed[[y, x, c]] = v.clamp(0.0, 1.0).powf(0.6);
            }
        }
    }
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, ky) in K.iter().enumerate() {
                    let sy = (y + i).saturating_sub(1).min(h - 1);
                    for (j, kx) in K.iter().enumerate() {
                        let sx = (x + j).saturating_sub(1).min(w - 1);
                        acc += ky * kx * mixed[[sy, sx, c]];
                    }
                }
                out[[y, x, c]] = acc;
            }
        }
    }
    out
}

/// One rendered frame, shifted if requested.
pub fn render_sample(
    resolution: (usize, usize),
    shift: Shift,
    rng: &mut RngHandle,
    id: &str,
) -> Result<(ImageSample, DepthMap, ToyScene)> {
    let scene = ToyScene::random(resolution, rng);
    let (mut img, depth) = scene.render();
    if shift == Shift::Photometric {
        img = photometric_shift(&img);
    }
    let mut depth = DepthMap::dense(depth);
    depth.max_depth = Some(TOY_MAX_DEPTH);
    Ok((ImageSample::new(img, id)?, depth, scene))
}

#[derive(Clone, Debug)]
pub struct ToyDataSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub shift: Shift,
    pub seed: u64,
    pub resolution: (usize, usize),
}

fn write_split(
    dir: &Path,
    spec: &ToyDataSpec,
    domain: &str,
    split: Split,
    n: usize,
    shift: Shift,
    with_depth: bool,
) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let depth_dir = dir.join("depth");
    if with_depth {
        std::fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    }
    let stream = seeded_rng(spec.seed, &format!("toy/{domain}/{split}"));
    for i in 0..n {
        let name = format!("{i:05}");
        let (img, depth, _) = render_sample(spec.resolution, shift, &mut stream.derive(i), &name)?;
        write_image(&img, &images.join(format!("{name}.png")))?;
        if with_depth {
            let path = depth_dir.join(format!("{name}.png"));
            let bytes = encode_depth_png(&depth, TOY_DEPTH_SCALE)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    let layout = DatasetLayout {
        image_glob: "images/*.png".into(),
        depth_glob: with_depth.then(|| "depth/*.png".into()),
        depth_scale_to_meters: TOY_DEPTH_SCALE,
        max_depth_m: Some(TOY_MAX_DEPTH as f64),
        split,
    };
    let path = dir.join(LAYOUT_FILE);
    std::fs::write(&path, layout.to_toml()).map_err(|e| Error::io(&path, e))
}

/// Writes `source/{train,test}` and `target/{train,test}` under `root`.
/// Target training images carry no depth.
pub fn make_toy_data(root: &Path, spec: &ToyDataSpec) -> Result<()> {
    let (h, w) = spec.resolution;
    if h == 0 || w == 0 {
        return Err(Error::Config("toy resolution must be positive".into()));
    }
    write_split(&root.join("source/train"), spec, "source", Split::Train, spec.n_train, Shift::None, true)?;
    write_split(&root.join("source/test"), spec, "source", Split::Test, spec.n_test, Shift::None, true)?;
    write_split(&root.join("target/train"), spec, "target", Split::Train, spec.n_train, spec.shift, false)?;
    write_split(&root.join("target/test"), spec, "target", Split::Test, spec.n_test, spec.shift, true)
}
