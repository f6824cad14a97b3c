//! On-disk checkpoints: `manifest.json` plus one blob per tensor.
//!
//! A blob is a `u32` row count and `u32` column count followed by the
//! values as `f32`, all little-endian. Every stored tensor holds values that
//! are exactly representable in f32, so a load reproduces it bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    /// Tasks completed when the checkpoint was taken.
    pub task_index: usize,
    pub tensors: Vec<TensorEntry>,
    /// Non-tensor run state.
    pub state: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub task_index: usize,
    pub tensors: BTreeMap<String, Tensor>,
    pub state: serde_json::Value,
}

pub fn encode_blob(t: &Tensor) -> Result<Vec<u8>> {
    let rows = u32::try_from(t.rows()).map_err(|_| Error::Checkpoint("tensor too large".into()))?;
    let cols = u32::try_from(t.cols()).map_err(|_| Error::Checkpoint("tensor too large".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * t.len());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in t.data() {
        let f = v as f32;
        if f as f64 != v && v.is_finite() {
            return Err(Error::Checkpoint(format!("value {v} is not exactly representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_blob(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("blob shorter than its header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * rows * cols {
        return Err(Error::Checkpoint(format!(
            "blob for {rows}x{cols} has {} data bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = format!("t{i:05}.bin");
            let path = dir.join(&file);
            fs::write(&path, encode_blob(t)?).map_err(|e| Error::io(&path, e))?;
            entries.push(TensorEntry {
                name: name.clone(),
                file,
                rows: t.rows(),
                cols: t.cols(),
            });
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            config_hash: self.config_hash.clone(),
            task_index: self.task_index,
            tensors: entries,
            state: self.state.clone(),
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let t = decode_blob(&bytes)?;
            if t.shape() != (e.rows, e.cols) {
                return Err(Error::Checkpoint(format!("{}: header disagrees with manifest", e.name)));
            }
            tensors.insert(e.name.clone(), t);
        }
        Ok(Checkpoint {
            config_hash: manifest.config_hash,
            task_index: manifest.task_index,
            tensors,
            state: manifest.state,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}
