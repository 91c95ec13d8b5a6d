//! Checkpoint directories: `model.bin` (flat little-endian f64) plus `manifest.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const BLOB_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the bit patterns of `t`; used to compare initial noise across runs.
pub fn tensor_hash(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Identifies a network layout: model kind, its config text and parameter shapes.
pub fn arch_hash(kind: &str, config_text: &str, params: &ParamSet) -> String {
    sha256_hex(format!("{kind}\n{config_text}\n{}", params.layout()).as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    arch_hash: String,
    blob_sha256: String,
    n_scalars: usize,
    meta: toml::Table,
    params: Vec<ParamEntry>,
}

/// What [`load`] returns besides the tensors.
pub struct Loaded {
    pub arch_hash: String,
    pub blob_sha256: String,
    pub meta: toml::Table,
    pub params: ParamSet,
}

pub fn save(dir: &Path, kind: &str, arch_hash: &str, params: &ParamSet, meta: toml::Table) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.n_scalars() * 8);
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        blob.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
    }
    let blob_sha256 = sha256_hex(&blob);
    let manifest = Manifest {
        kind: kind.into(),
        arch_hash: arch_hash.into(),
        blob_sha256: blob_sha256.clone(),
        n_scalars: offset,
        meta,
        params: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(blob_sha256)
}

pub fn load(dir: &Path, kind: &str) -> Result<Loaded> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            dir.display(),
            m.kind
        )));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::Checkpoint(format!("{}: {e}", bpath.display())))?;
    if blob.len() != m.n_scalars * 8 {
        return Err(Error::format(&bpath, format!("expected {} bytes, found {}", m.n_scalars * 8, blob.len())));
    }
    if sha256_hex(&blob) != m.blob_sha256 {
        return Err(Error::format(&bpath, "checksum mismatch"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut params = ParamSet::new();
    for e in &m.params {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::format(&mpath, format!("parameter {} out of range", e.name)))?;
        params.push(e.name.clone(), Tensor::new(&e.shape, slice.to_vec())?);
    }
    Ok(Loaded {
        arch_hash: m.arch_hash,
        blob_sha256: m.blob_sha256,
        meta: m.meta,
        params,
    })
}

/// Copies loaded tensors into `target` after checking name order and the architecture hash.
pub fn restore_into(loaded: Loaded, expected_hash: &str, target: &mut ParamSet) -> Result<()> {
    if loaded.arch_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "architecture hash {} does not match this build ({expected_hash})",
            loaded.arch_hash
        )));
    }
    if loaded.params.names() != target.names() {
        return Err(Error::Checkpoint("parameter names differ".into()));
    }
    target.load_tensors(loaded.params.tensors().to_vec())
}
