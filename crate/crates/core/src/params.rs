//! Named parameter storage.
//!
//! Parameters are candle `Var`s keyed by dotted names such as
//! `encoder.layer12.pw.conv.weight`. A `BTreeMap` keeps iteration order (and
//! therefore checkpoints, fingerprints and optimizer traversal) stable.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Read access to named tensors during a forward pass.
pub trait Weights {
    fn weight(&self, name: &str) -> Result<Tensor>;

    /// Writes a non-trainable buffer (batch-norm running statistics).
    /// Immutable weight sources ignore the update.
    fn update_buffer(&self, _name: &str, _value: &Tensor) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Default)]
pub struct ParamMap {
    vars: BTreeMap<String, Var>,
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every tensor into fresh storage, so later `Var::set` calls on
    /// `self` are invisible to the copy.
    pub fn deep_copy(&self) -> Result<ParamMap> {
        let mut out = ParamMap::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites the values of existing entries from `source`; every name in
    /// `self` must be present there with the same shape.
    pub fn load_from(&self, source: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = source
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(tensor_le_bytes(var.as_tensor())?);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParamMap> {
        let mut out = ParamMap::new();
        for name in names {
            let var = self
                .get(name)
                .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
            out.insert(name, var.clone());
        }
        Ok(out)
    }
}

impl std::fmt::Debug for ParamMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.vars.iter().map(|(k, v)| (k, v.dims().to_vec())))
            .finish()
    }
}

impl Weights for ParamMap {
    fn weight(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::Argument(format!("unknown weight `{name}`")))
    }

    fn update_buffer(&self, name: &str, value: &Tensor) -> Result<()> {
        match self.vars.get(name) {
            Some(var) => Ok(var.set(value)?),
            None => Err(Error::Argument(format!("unknown buffer `{name}`"))),
        }
    }
}

impl Weights for BTreeMap<String, Tensor> {
    fn weight(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("unknown weight `{name}`")))
    }
}

pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
    })
}
