//! Checkpoint directories: `manifest.json` plus little-endian `params.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Gur, ModelConfig, Vocab};
use crate::error::{GurError, Result};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    /// Hex SHA-256 of `params.bin`.
    pub content_hash: String,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| GurError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| GurError::CorruptCheckpoint(format!("{}: {e}", path.display())))
}

pub(super) fn save<T: Scalar>(model: &Gur<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GurError::io(dir, e))?;
    let mut bytes = Vec::with_capacity(model.params.num_scalars() * T::BYTES);
    let mut entries = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        dtype: T::DTYPE.to_string(),
        params: entries,
        content_hash: hex::encode(Sha256::digest(&bytes)),
    };
    let pbin = dir.join(PARAMS_FILE);
    std::fs::write(&pbin, &bytes).map_err(|e| GurError::io(&pbin, e))?;
    let pman = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&pman, json + "\n").map_err(|e| GurError::io(&pman, e))
}

pub(super) fn load<T: Scalar>(dir: &Path, expected: Option<&ModelConfig>) -> Result<Gur<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(GurError::CorruptCheckpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != manifest.config {
            return Err(GurError::ConfigMismatch(format!(
                "checkpoint config {} differs from expected {}",
                serde_json::to_string(&manifest.config)?,
                serde_json::to_string(cfg)?
            )));
        }
    }
    if manifest.dtype != T::DTYPE {
        return Err(GurError::ConfigMismatch(format!(
            "checkpoint dtype {} but {} was requested",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| GurError::io(&path, e))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    if hash != manifest.content_hash {
        return Err(GurError::CorruptCheckpoint(format!(
            "{} hash {hash} does not match manifest {}",
            path.display(),
            manifest.content_hash
        )));
    }
    let mut model = Gur::<T>::new(manifest.config.clone(), manifest.vocab.clone(), 0)?;
    let layout: Vec<ParamEntry> = model
        .params
        .iter()
        .map(|(n, t)| ParamEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if layout != manifest.params {
        return Err(GurError::ConfigMismatch(
            "parameter names or shapes differ from those implied by the config".into(),
        ));
    }
    let total: usize = layout.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * T::BYTES {
        return Err(GurError::CorruptCheckpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            total * T::BYTES
        )));
    }
    let mut chunks = bytes.chunks_exact(T::BYTES);
    let ids: Vec<_> = model.params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&layout) {
        let n: usize = entry.shape.iter().product();
        let data: Vec<T> = chunks.by_ref().take(n).map(T::read_le).collect();
        *model.params.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(model)
}
