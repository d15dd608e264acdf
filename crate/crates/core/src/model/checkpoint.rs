//! Checkpoint directory: `manifest.json` plus `params.bin`.
//!
//! `params.bin` starts with the magic `PCFTPAR1` followed by one record per
//! tensor: `u32` name length, name bytes, `u64` rows, `u64` cols and
//! `rows * cols` little-endian `f64`. The manifest lists every tensor with
//! its shape and the sha256 of its data bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::autograd::{ParamStore, Tensor};
use crate::fsutil::{replace_dir, staging_path};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const MAGIC: &[u8; 8] = b"PCFTPAR1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Cft,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn new(kind: CheckpointKind, config: serde_json::Value, seed: u64, step: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            config,
            seed,
            step,
            tensors: Vec::new(),
        }
    }
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Vec<(String, Tensor)>,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest over every parameter name, shape and value in store order.
pub fn params_checksum(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in store.iter() {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rows as u64).to_le_bytes());
        h.update((t.cols as u64).to_le_bytes());
        h.update(tensor_bytes(t));
    }
    hex::encode(h.finalize())
}

/// Writes `store` atomically into `dir`, replacing any previous checkpoint.
pub fn write_checkpoint(dir: &Path, mut manifest: CheckpointManifest, store: &ParamStore) -> Result<(), ModelError> {
    let mut blob = MAGIC.to_vec();
    manifest.tensors.clear();
    for (_, name, t) in store.iter() {
        let bytes = tensor_bytes(t);
        blob.extend((name.len() as u32).to_le_bytes());
        blob.extend(name.as_bytes());
        blob.extend((t.rows as u64).to_le_bytes());
        blob.extend((t.cols as u64).to_le_bytes());
        manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows,
            cols: t.cols,
            sha256: sha_hex(&bytes),
        });
        blob.extend(bytes);
    }
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    fs::write(staging.join(PARAMS_FILE), blob)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(staging.join(MANIFEST_FILE), json)?;
    replace_dir(&staging, dir)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated params file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads and verifies a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let mut r = Reader { buf: &blob, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("tensor name not utf-8".into()))?;
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        if name != entry.name || rows != entry.rows || cols != entry.cols {
            return Err(bad(format!("tensor {name} disagrees with manifest entry {}", entry.name)));
        }
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| bad("tensor too large".into()))?;
        let bytes = r.take(n)?;
        if sha_hex(bytes) != entry.sha256 {
            return Err(bad(format!("checksum mismatch for {name}")));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.pos != blob.len() {
        return Err(bad("trailing bytes in params file".into()));
    }
    Ok(Checkpoint { manifest, params })
}

/// Copies loaded tensors into a freshly built store with the same layout.
pub(crate) fn assign(store: &mut ParamStore, params: Vec<(String, Tensor)>) -> Result<(), ModelError> {
    if params.len() != store.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, t) in params {
        let id = store
            .id(&name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
        }
        store.set(id, t);
    }
    Ok(())
}
