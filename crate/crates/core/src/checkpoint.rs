//! Checkpoint archive: a safetensors file whose metadata carries a TOML
//! manifest (format version, kind, architecture, resolution, seed, progress
//! counters and the settings a resumed run must match).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::tensor_le_bytes;

pub const FORMAT_VERSION: &str = "1.0.0";
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Adapt,
    /// Stub that predicts the ground truth; used to sanity-check evaluation.
    Oracle,
    /// Written when training aborts on a non-finite loss.
    Diagnostic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub kind: CheckpointKind,
    pub architecture: String,
    pub resolution: [usize; 2],
    pub seed: u64,
    pub epoch: u64,
    #[serde(default)]
    pub iteration: u64,
    /// Integer counters (optimizer step counts and the like).
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
    /// Settings that must be identical for a run to resume from this file.
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(kind: CheckpointKind, architecture: &str, resolution: (usize, usize), seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_owned(),
            kind,
            architecture: architecture.to_owned(),
            resolution: [resolution.0, resolution.1],
            seed,
            epoch: 0,
            iteration: 0,
            counters: BTreeMap::new(),
            settings: BTreeMap::new(),
        }
    }

    /// Human-readable differences against the settings of the current run.
    pub fn diff_settings(&self, current: &BTreeMap<String, String>) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in current {
            match self.settings.get(k) {
                Some(old) if old == v => {}
                Some(old) => out.push(format!("{k}: checkpoint `{old}`, config `{v}`")),
                None => out.push(format!("{k}: missing from checkpoint, config `{v}`")),
            }
        }
        for k in self.settings.keys() {
            if !current.contains_key(k) {
                out.push(format!("{k}: only in checkpoint"));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(manifest: Manifest) -> Self {
        Self {
            manifest,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert_all(&mut self, arrays: BTreeMap<String, Tensor>) {
        self.arrays.extend(arrays);
    }

    /// Arrays whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_owned(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = toml::to_string(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("cannot encode manifest: {e}")))?;
        let mut encoded = Vec::with_capacity(self.arrays.len());
        for (name, t) in &self.arrays {
            let dtype = match t.dtype() {
                DType::F64 => Dtype::F64,
                _ => Dtype::F32,
            };
            encoded.push((name.as_str(), dtype, t.dims().to_vec(), tensor_le_bytes(t)?));
        }
        let views = encoded
            .iter()
            .map(|(name, dtype, shape, bytes)| {
                TensorView::new(*dtype, shape.clone(), bytes).map(|v| (*name, v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([(MANIFEST_KEY.to_owned(), manifest)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, meta) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| Error::Checkpoint("archive has no manifest".into()))?;
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let major = manifest.format_version.split('.').next().unwrap_or("");
        if major != FORMAT_VERSION.split('.').next().unwrap_or("") {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "array `{name}` has unsupported dtype {other:?}"
                    )))
                }
            };
            arrays.insert(name, t);
        }
        Ok(Self { manifest, arrays })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
