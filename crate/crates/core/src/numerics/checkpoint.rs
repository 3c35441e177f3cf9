//! Named-tensor checkpoints: a JSON manifest next to a raw little-endian `f32` blob.
//!
//! `<stem>.json` holds `{format, meta, tensors: [{name, shape, offset}]}` where
//! `offset` is a byte offset into `<stem>.bin`. Optimizer moments live under the
//! reserved `__adam__/` namespace.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamConfig, AdamState};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT: &str = "versa-ckpt-1";
const ADAM_PREFIX: &str = "__adam__/";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_params(mut self, store: &ParamStore) -> Self {
        for (name, t) in store.iter() {
            self.tensors.insert(name.to_string(), t.clone());
        }
        self
    }

    /// Store optimizer moments under the reserved namespace and its scalars in `meta`.
    pub fn with_adam(mut self, state: &AdamState) -> Self {
        for (name, t) in &state.m {
            self.tensors
                .insert(format!("{ADAM_PREFIX}m/{name}"), t.clone());
        }
        for (name, t) in &state.v {
            self.tensors
                .insert(format!("{ADAM_PREFIX}v/{name}"), t.clone());
        }
        if let serde_json::Value::Object(map) = &mut self.meta {
            map.insert("adam_step".into(), state.step.into());
            map.insert(
                "adam_config".into(),
                serde_json::to_value(state.config).expect("adam config serializes"),
            );
        }
        self
    }

    /// Model parameters (everything outside the optimizer namespace).
    pub fn params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if !name.starts_with(ADAM_PREFIX) {
                store.insert(name.clone(), t.clone())?;
            }
        }
        Ok(store)
    }

    pub fn adam(&self) -> Option<AdamState> {
        let config: AdamConfig =
            serde_json::from_value(self.meta.get("adam_config")?.clone()).ok()?;
        let step = self.meta.get("adam_step")?.as_u64()?;
        let mut state = AdamState::new(config);
        state.step = step;
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(ADAM_PREFIX) {
                if let Some(p) = rest.strip_prefix("m/") {
                    state.m.insert(p.to_string(), t.clone());
                } else if let Some(p) = rest.strip_prefix("v/") {
                    state.v.insert(p.to_string(), t.clone());
                }
            }
        }
        Some(state)
    }

    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, blob))
    }

    pub fn from_bytes(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(manifest)?;
        if manifest.format != FORMAT {
            return Err(Error::Compatibility(format!(
                "checkpoint format `{}`, expected `{FORMAT}`",
                manifest.format
            )));
        }
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > blob.len() {
                return Err(Error::InvalidInput(format!(
                    "tensor `{}` runs past the end of the blob",
                    e.name
                )));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json, blob) = self.to_bytes()?;
        write_atomic(&blob_path(stem), &blob)?;
        write_atomic(&manifest_path(stem), &json)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json = std::fs::read(manifest_path(stem))?;
        let blob = std::fs::read(blob_path(stem))?;
        Self::from_bytes(&json, &blob)
    }

    /// SHA-256 over manifest and blob bytes.
    pub fn hash(&self) -> Result<String> {
        let (json, blob) = self.to_bytes()?;
        let mut h = Sha256::new();
        h.update(&json);
        h.update(&blob);
        Ok(hex::encode(h.finalize()))
    }
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "bin")
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
