//! Checkpoints: a JSON manifest plus one blob of little-endian `f32`s,
//! concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub trainable: bool,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(TensorEntry::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(TensorEntry::numel)
            .sum()
    }
}

/// Serializes the stores, prefixing each tensor name with the store label.
pub fn encode(
    stores: &[(&str, &ParamStore)],
    meta: BTreeMap<String, serde_json::Value>,
) -> (Manifest, Vec<u8>) {
    let mut manifest = Manifest {
        tensors: Vec::new(),
        meta,
    };
    let mut blob = Vec::new();
    for (label, store) in stores {
        for (_, p) in store.iter() {
            manifest.tensors.push(TensorEntry {
                name: qualified(label, &p.name),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len() as u64,
                trainable: p.trainable,
            });
            for &v in p.value.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    (manifest, blob)
}

fn qualified(label: &str, name: &str) -> String {
    if label.is_empty() {
        name.to_string()
    } else {
        format!("{label}.{name}")
    }
}

/// Raw tensors stored as a `(name, shape)` list, for data that is not a
/// parameter store (e.g. an aggregated signal).
pub fn encode_tensors(
    tensors: &[(&str, &Tensor)],
    meta: BTreeMap<String, serde_json::Value>,
) -> (Manifest, Vec<u8>) {
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.add(*name, (*t).clone(), false);
    }
    encode(&[("", &store)], meta)
}

pub fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let base = prefix.to_string_lossy();
    (
        PathBuf::from(format!("{base}.manifest.json")),
        PathBuf::from(format!("{base}.bin")),
    )
}

pub fn write(prefix: &Path, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    let (m, b) = paths(prefix);
    fs::write(m, serde_json::to_string_pretty(manifest)? + "\n")?;
    fs::write(b, blob)?;
    Ok(())
}

pub fn save(
    prefix: &Path,
    stores: &[(&str, &ParamStore)],
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    let (manifest, blob) = encode(stores, meta);
    write(prefix, &manifest, &blob)?;
    Ok(manifest)
}

pub fn read(prefix: &Path) -> Result<(Manifest, Vec<u8>)> {
    let (m, b) = paths(prefix);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(m)?)?;
    let blob = fs::read(b)?;
    Ok((manifest, blob))
}

/// Decodes every tensor listed in the manifest.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(TensorEntry, Tensor)>> {
    manifest
        .tensors
        .iter()
        .map(|e| {
            if e.dtype != "f32" {
                return Err(Error::Protocol(format!("unsupported dtype {}", e.dtype)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.numel();
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Protocol(format!("blob too short for {}", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok((e.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}

/// Overwrites values (and trainable flags) of `store` from the entries
/// labelled `label`. Every parameter of the store must be present.
pub fn restore(store: &mut ParamStore, label: &str, entries: &[(TensorEntry, Tensor)]) -> Result<()> {
    let by_name: BTreeMap<&str, &(TensorEntry, Tensor)> =
        entries.iter().map(|e| (e.0.name.as_str(), e)).collect();
    for p in store.iter_mut() {
        let name = qualified(label, &p.name);
        let (entry, t) = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Protocol(format!("checkpoint lacks {name}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::dim(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
        p.trainable = entry.trainable;
    }
    Ok(())
}
