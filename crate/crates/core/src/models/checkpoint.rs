//! Checkpoints: a JSON manifest plus a flat little-endian `f64` blob.
//!
//! The manifest records the model architecture, the mixture order and, for
//! every parameter group, each tensor's name, shape and byte offset into the
//! blob. The blob file sits next to the manifest and is named in it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, RecursiveMixtureModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first element in the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub order: usize,
    pub blob: String,
    pub blob_bytes: u64,
    pub groups: Vec<GroupEntry>,
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<path>` (manifest) and `<path>.bin` (blob, extension replaced).
pub fn save(model: &RecursiveMixtureModel, path: &Path) -> Result<()> {
    let blob_path = blob_path_for(path);
    let mut blob = Vec::with_capacity(model.store.num_values() * 8);
    let mut groups = Vec::new();
    for g in model.store.groups() {
        let mut tensors = Vec::new();
        for p in &g.params {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        groups.push(GroupEntry {
            name: g.name.clone(),
            tensors,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        order: model.order(),
        blob: blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        blob_bytes: blob.len() as u64,
        groups,
    };
    write_atomic(&blob_path, &blob)?;
    write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Rebuilds a model from a manifest and its blob, validating every group,
/// tensor name, shape and offset against the architecture.
pub fn load(path: &Path) -> Result<RecursiveMixtureModel> {
    let manifest = read_manifest(path)?;
    let blob_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    // layout comes from the architecture; values are overwritten below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = RecursiveMixtureModel::new(manifest.spec.clone(), manifest.order, &mut rng)
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
    if model.store.groups().len() != manifest.groups.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter groups, manifest has {}",
            model.store.groups().len(),
            manifest.groups.len()
        )));
    }
    for (gi, entry) in manifest.groups.iter().enumerate() {
        let group = model.store.group_mut(crate::tensor::GroupId(gi));
        if group.name != entry.name || group.params.len() != entry.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "group {gi}: expected `{}` with {} tensors",
                group.name,
                group.params.len()
            )));
        }
        for (p, t) in group.params.iter_mut().zip(&entry.tensors) {
            if p.name != t.name || p.value.shape() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` in `{}` does not match architecture",
                    t.name, entry.name
                )));
            }
            let n = p.value.len();
            let start = usize::try_from(t.offset).map_err(|_| Error::Checkpoint("offset overflow".into()))?;
            let end = start
                .checked_add(n * 8)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the blob", t.name)))?;
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            p.value = Tensor::new(t.shape.clone(), data)?;
        }
    }
    Ok(model)
}
