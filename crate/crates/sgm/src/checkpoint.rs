//! Checkpoint directories.
//!
//! A checkpoint holds `manifest.json` (one `{name, shape, dtype, offset,
//! length}` entry per tensor, offsets and lengths in bytes), `params.bin`
//! (little-endian `f64` values in manifest order) and the JSON files needed
//! to rebuild the encoder: `model.json`, `schema.json`, `head.json`. An
//! optional `meta.json` records the training step.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgm_core::data::OrganSchema;
use sgm_core::model::{Encoder, HeadSpec, ModelConfig};
use sgm_core::tensor::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsio::{read_json, write_atomic, write_json};

const F64: &str = "f64";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub epoch: usize,
}

/// A loaded checkpoint: the rebuilt layout and its parameter values.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub encoder: Encoder,
    pub store: ParamStore,
    pub meta: Option<CheckpointMeta>,
}

fn manifest_of(store: &ParamStore) -> Vec<ManifestEntry> {
    let mut offset = 0;
    store
        .entries()
        .iter()
        .map(|e| {
            let length = e.value.len() * 8;
            let m = ManifestEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                dtype: F64.into(),
                offset,
                length,
            };
            offset += length;
            m
        })
        .collect()
}

fn params_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_values() * 8);
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes `manifest.json` and `params.bin`.
pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_atomic(&dir.join("params.bin"), &params_bytes(store))?;
    write_json(&dir.join("manifest.json"), &manifest_of(store))
}

/// Reads parameter values into a copy of `template`, which fixes names,
/// shapes and weight-decay flags. The manifest must match exactly.
pub fn load_params(dir: &Path, template: &ParamStore) -> Result<ParamStore> {
    let bad = |msg: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        msg,
    };
    let manifest: Vec<ManifestEntry> = read_json(&dir.join("manifest.json"))?;
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(Error::io(&bin))?;
    if manifest.len() != template.len() {
        return Err(bad(format!(
            "{} tensors in manifest, model has {}",
            manifest.len(),
            template.len()
        )));
    }
    let mut store = template.clone();
    for (m, e) in manifest.iter().zip(store.entries_mut()) {
        if m.name != e.name || m.shape != e.value.shape() {
            return Err(bad(format!(
                "entry {} {:?} does not match model tensor {} {:?}",
                m.name,
                m.shape,
                e.name,
                e.value.shape()
            )));
        }
        if m.dtype != F64 {
            return Err(bad(format!("{}: unsupported dtype {}", m.name, m.dtype)));
        }
        if m.length != e.value.len() * 8 || m.offset + m.length > bytes.len() {
            return Err(bad(format!("{}: byte range out of bounds", m.name)));
        }
        let values: Vec<f64> = bytes[m.offset..m.offset + m.length]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        e.value = Tensor::new(m.shape.clone(), values)?;
    }
    let expected: usize = manifest.iter().map(|m| m.length).sum();
    if expected != bytes.len() {
        return Err(bad(format!(
            "params.bin has {} bytes, manifest covers {expected}",
            bytes.len()
        )));
    }
    Ok(store)
}

/// Writes a full checkpoint directory.
pub fn save_checkpoint(dir: &Path, encoder: &Encoder, store: &ParamStore, meta: Option<CheckpointMeta>) -> Result<()> {
    save_params(dir, store)?;
    write_json(&dir.join("model.json"), encoder.config())?;
    write_json(&dir.join("schema.json"), encoder.schema())?;
    write_json(&dir.join("head.json"), encoder.head_spec())?;
    if let Some(meta) = meta {
        write_json(&dir.join("meta.json"), &meta)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config: ModelConfig = read_json(&dir.join("model.json"))?;
    let schema: OrganSchema = read_json(&dir.join("schema.json"))?;
    let head: HeadSpec = read_json(&dir.join("head.json"))?;
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        Some(read_json(&meta_path)?)
    } else {
        None
    };
    let (encoder, template) = Encoder::new(config, schema, head, 0)?;
    let store = load_params(dir, &template)?;
    Ok(Checkpoint {
        path: dir.to_path_buf(),
        encoder,
        store,
        meta,
    })
}

/// SHA-256 over the manifest and parameter bytes, as lowercase hex.
pub fn store_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&manifest_of(store)).expect("manifest"));
    h.update(params_bytes(store));
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
