//! Checkpoint directory: `manifest.json` describing every tensor and a flat
//! little-endian `f64` blob `params.bin` holding their values.

use std::path::Path;

use pllforge_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{CoreError, Result};
use crate::io::{read_json, write_bytes, write_json};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub buffer: bool,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f64` values.
    pub offset: usize,
    pub group: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub total_values: usize,
}

pub fn save_checkpoint(dir: &Path, meta: serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, buffer: bool, value: &Tensor, group: usize, trainable: bool| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            buffer,
            shape: value.shape().to_vec(),
            offset,
            group,
            trainable,
        });
        offset += value.len();
        for v in value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in store.params() {
        push(&p.name, false, &p.value, p.group, p.trainable);
    }
    for (name, value) in store.buffers() {
        push(name, true, value, 0, false);
    }
    let manifest = CheckpointManifest {
        meta,
        tensors,
        total_values: offset,
    };
    write_bytes(&dir.join(CHECKPOINT_BLOB), &blob)?;
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    let blob_path = dir.join(CHECKPOINT_BLOB);
    let bytes = std::fs::read(&blob_path).map_err(|e| CoreError::io(&blob_path, e))?;
    if bytes.len() != manifest.total_values * 8 {
        return Err(CoreError::format(
            &blob_path,
            format!("expected {} values, found {} bytes", manifest.total_values, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| CoreError::format(&blob_path, format!("{} runs past the blob", e.name)))?
            .to_vec();
        let t = Tensor::new(e.shape.clone(), data)?;
        if e.buffer {
            store.set_buffer(e.name.clone(), t);
        } else if e.trainable {
            store.add(e.name.clone(), t, e.group);
        } else {
            store.add_frozen(e.name.clone(), t);
        }
    }
    Ok((manifest.meta, store))
}
