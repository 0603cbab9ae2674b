//! Checkpoint I/O: a JSON manifest (names, shapes, content hashes) next to a
//! raw little-endian f64 blob. The blob round-trips bit-exactly.
//!
//! Backbone and adapter tensors live in separate archives so adapter stages
//! can be diffed and reloaded independently of the frozen backbone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::AdapterState;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// element offset into the blob
    pub offset: usize,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub version: u32,
    pub entries: Vec<ArchiveEntry>,
    pub payload_sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{:02x}", b)).collect()
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write `<stem>.manifest.json` and `<stem>.bin` under `dir`.
pub fn write_archive(
    dir: &Path,
    stem: &str,
    tensors: &BTreeMap<String, &Tensor>,
) -> Result<ArchiveManifest> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        let bytes = tensor_bytes(t);
        entries.push(ArchiveEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset: payload.len() / 8,
            len: t.data.len(),
            sha256: hex_digest(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = ArchiveManifest { version: 1, entries, payload_sha256: hex_digest(&payload) };
    fs::write(dir.join(format!("{}.bin", stem)), &payload)?;
    fs::write(
        dir.join(format!("{}.manifest.json", stem)),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_archive(dir: &Path, stem: &str) -> Result<BTreeMap<String, Tensor>> {
    let manifest: ArchiveManifest =
        serde_json::from_slice(&fs::read(dir.join(format!("{}.manifest.json", stem)))?)?;
    let payload = fs::read(dir.join(format!("{}.bin", stem)))?;
    if hex_digest(&payload) != manifest.payload_sha256 {
        return Err(Error::Data(format!("payload hash mismatch in archive '{}'", stem)));
    }
    let mut out = BTreeMap::new();
    for e in &manifest.entries {
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > payload.len() {
            return Err(Error::Data(format!("archive entry '{}' out of bounds", e.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    tokenizer: Tokenizer,
}

pub fn save_model(dir: &Path, model: &Model, tokenizer: &Tokenizer) -> Result<()> {
    fs::create_dir_all(dir)?;
    let named: BTreeMap<String, &Tensor> =
        model.params.iter().map(|(k, v)| (k.clone(), v)).collect();
    write_archive(dir, "model", &named)?;
    let meta = ModelMeta { config: model.config.clone(), tokenizer: tokenizer.clone() };
    fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(Model, Tokenizer)> {
    let mut meta: ModelMeta = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
    meta.tokenizer.reindex();
    let params = read_archive(dir, "model")?;
    Ok((Model { config: meta.config, params }, meta.tokenizer))
}

pub fn save_adapters(dir: &Path, state: &AdapterState) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_archive(dir, "adapter", &state.named_tensors())?;
    fs::write(dir.join("adapter.json"), serde_json::to_vec_pretty(state)?)?;
    Ok(())
}

pub fn load_adapters(dir: &Path) -> Result<AdapterState> {
    let mut state: AdapterState =
        serde_json::from_slice(&fs::read(dir.join("adapter.json"))?)?;
    // blob is the source of truth for tensor payloads
    let archive = read_archive(dir, "adapter")?;
    for (name, t) in state.named_tensors_mut() {
        let loaded = archive
            .get(&name)
            .ok_or_else(|| Error::Data(format!("adapter tensor '{}' missing from archive", name)))?;
        if loaded.shape != t.shape {
            return Err(Error::Data(format!("adapter tensor '{}' shape changed", name)));
        }
        t.data = loaded.data.clone();
    }
    Ok(state)
}

/// Hash identifying a checkpoint directory's tensor content.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for stem in ["model", "adapter"] {
        let p = dir.join(format!("{}.bin", stem));
        if p.exists() {
            h.update(fs::read(p)?);
        }
    }
    let out = h.finalize();
    Ok(out.iter().map(|b| format!("{:02x}", b)).collect())
}
