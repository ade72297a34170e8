//! `dcls-ckpt-v1`: a JSON manifest next to a little-endian f64 blob.
//!
//! `<base>.json` holds the encoder config, tensor names/shapes/byte offsets and
//! free-form metadata; `<base>.bin` holds the values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel, Params};
use crate::error::{Error, Result};

pub const FORMAT: &str = "dcls-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: EncoderConfig,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

pub fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

pub fn exists(base: &Path) -> bool {
    manifest_path(base).is_file() && blob_path(base).is_file()
}

pub fn save(base: &Path, model: &EncoderModel, metadata: serde_json::Value) -> Result<()> {
    let layout = Params::layout(&model.config);
    let mut blob = Vec::with_capacity(model.params.num_values() * 8);
    let mut tensors = Vec::with_capacity(layout.len());
    for (info, values) in layout.into_iter().zip(model.params.slices()) {
        let offset = blob.len();
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: info.name,
            shape: info.shape,
            offset,
            bytes: blob.len() - offset,
        });
    }
    let blob_file = blob_path(base);
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: model.config.clone(),
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
        metadata,
    };
    write_atomic(&blob_file, &blob)?;
    write_atomic(
        &manifest_path(base),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load(base: &Path) -> Result<(EncoderModel, serde_json::Value)> {
    let mpath = manifest_path(base);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format '{}'",
            manifest.format
        )));
    }
    manifest.config.validate()?;
    let bpath = mpath.with_file_name(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut params = Params::zeros(&manifest.config);
    let layout = Params::layout(&manifest.config);
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint("tensor count mismatch".into()));
    }
    for ((info, entry), dst) in layout
        .iter()
        .zip(&manifest.tensors)
        .zip(params.slices_mut())
    {
        if info.name != entry.name || info.shape != entry.shape || entry.bytes != dst.len() * 8 {
            return Err(Error::Checkpoint(format!("tensor '{}' mismatch", entry.name)));
        }
        let src = blob
            .get(entry.offset..entry.offset + entry.bytes)
            .ok_or_else(|| Error::Checkpoint(format!("blob too short for '{}'", entry.name)))?;
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok((EncoderModel::from_params(manifest.config, params), manifest.metadata))
}
