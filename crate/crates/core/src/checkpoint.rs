//! Versioned checkpoint: magic, version, JSON manifest, raw little-endian f64
//! payload.
//!
//! Layout: `b"SERACKPT"`, `u32` version, `u64` manifest length, manifest
//! bytes, payload. Manifest offsets are byte offsets into the payload.

use std::fs;
use std::path::Path;

use sera_tensor::{ParamKind, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::SeraModel;

pub const MAGIC: &[u8; 8] = b"SERACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &SeraModel) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for (_, p) in model.store.iter() {
        let offset = payload.len() as u64;
        for v in p.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ParamEntry {
            name: p.name.clone(),
            kind: p.kind.as_str().to_string(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable(),
            offset,
            bytes: payload.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        seed: model.seed(),
        config: model.cfg.clone(),
        params,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CoreError::Checkpoint("file is truncated".into()))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, usize)> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(CoreError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(take(bytes, &mut at, len)?)?;
    Ok((manifest, at))
}

/// Rebuilds the model from the stored config and seed, then overwrites every
/// parameter and trainable flag from the payload.
pub fn from_bytes(bytes: &[u8]) -> Result<SeraModel> {
    let (manifest, start) = read_manifest(bytes)?;
    let mut model = SeraModel::new(&manifest.config, manifest.seed)?;
    let payload = &bytes[start..];
    if model.store.len() != manifest.params.len() {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint holds {} parameters, the model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| CoreError::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let p = model.store.get(id);
        if p.tensor.shape() != entry.shape.as_slice()
            || ParamKind::parse(&entry.kind) != Some(p.kind)
        {
            return Err(CoreError::Checkpoint(format!(
                "parameter {} differs in shape or kind",
                entry.name
            )));
        }
        let n: usize = entry.shape.iter().product();
        if entry.bytes as usize != n * 8 {
            return Err(CoreError::Checkpoint(format!(
                "parameter {} has a bad byte count",
                entry.name
            )));
        }
        let mut at = entry.offset as usize;
        let raw = take(payload, &mut at, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model
            .store
            .set_tensor(id, Tensor::new(&entry.shape, data)?)?;
        model.store.get_mut(id).set_trainable(entry.trainable)?;
    }
    Ok(model)
}

pub fn save(path: &Path, model: &SeraModel) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SeraModel> {
    from_bytes(&fs::read(path)?)
}
