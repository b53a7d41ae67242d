//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `PUCKPT01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor as packed little-endian `f32`.
//! Manifest offsets are relative to the first blob byte and must tile the
//! blob section exactly, in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PUCKPT01";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

/// Training provenance carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub train_seed: Option<u64>,
    pub history_digest: Option<String>,
    /// Fully resolved run configuration.
    pub resolved_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    blob_sha256: String,
    meta: CheckpointMeta,
}

fn tensors(params: &ModelParams<f32>) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
    params.weights.iter().chain(params.buffers.iter())
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    params.validate()?;
    let mut blobs = Vec::new();
    let mut manifest = Vec::new();
    for (name, t) in tensors(params) {
        let offset = blobs.len() as u64;
        for v in t.data() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len: blobs.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        manifest,
        blob_sha256: crate::seed::digest_hex(&blobs),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Parse and fully validate checkpoint bytes before touching any blob.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Corrupt("file shorter than the magic".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    if bytes.len() < PREFIX {
        return Err(Error::Corrupt("truncated header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[PREFIX..];
    if header_len > body.len() as u64 {
        return Err(Error::Corrupt(format!(
            "header length {header_len} exceeds the {} bytes present",
            body.len()
        )));
    }
    let (json, blobs) = body.split_at(header_len as usize);
    let raw: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v.min(u32::MAX as u64) as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::Corrupt("header lacks format_version".into())),
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::Corrupt(format!("header config: {e}")))?;

    let mut expected: BTreeMap<String, Vec<usize>> = header.config.param_shapes();
    for bn in header.config.bn_layers() {
        let c = expected[&format!("{bn}.gamma")].clone();
        expected.insert(format!("{bn}.running_mean"), c.clone());
        expected.insert(format!("{bn}.running_var"), c);
    }
    if header.manifest.len() != expected.len() {
        return Err(Error::Corrupt(format!(
            "manifest lists {} tensors, config implies {}",
            header.manifest.len(),
            expected.len()
        )));
    }
    let mut cursor = 0u64;
    for e in &header.manifest {
        let want = expected
            .remove(&e.name)
            .ok_or_else(|| Error::Corrupt(format!("unexpected or repeated tensor {:?}", e.name)))?;
        if e.shape != want {
            return Err(Error::Corrupt(format!("tensor {} has shape {:?}, expected {want:?}", e.name, e.shape)));
        }
        if e.dtype != "f32" {
            return Err(Error::Corrupt(format!("tensor {} has dtype {:?}", e.name, e.dtype)));
        }
        let n: u64 = want.iter().map(|&d| d as u64).product();
        if e.offset != cursor || e.len != 4 * n {
            return Err(Error::Corrupt(format!(
                "tensor {} spans [{}, +{}), expected [{cursor}, +{})",
                e.name,
                e.offset,
                e.len,
                4 * n
            )));
        }
        if e.offset + e.len > blobs.len() as u64 {
            return Err(Error::Corrupt(format!("tensor {} extends past end of file", e.name)));
        }
        cursor += e.len;
    }
    if cursor != blobs.len() as u64 {
        return Err(Error::Corrupt(format!(
            "blob section is {} bytes, manifest covers {cursor}",
            blobs.len()
        )));
    }
    if crate::seed::digest_hex(blobs) != header.blob_sha256 {
        return Err(Error::Corrupt("blob checksum mismatch".into()));
    }

    let mut params = ModelParams {
        config: header.config.clone(),
        weights: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    let buffer_names: std::collections::BTreeSet<String> = header
        .config
        .bn_layers()
        .into_iter()
        .flat_map(|bn| [format!("{bn}.running_mean"), format!("{bn}.running_var")])
        .collect();
    for e in &header.manifest {
        let raw = &blobs[e.offset as usize..(e.offset + e.len) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if buffer_names.contains(&e.name) {
            params.buffers.insert(e.name.clone(), t);
        } else {
            params.weights.insert(e.name.clone(), t);
        }
    }
    params.validate()?;
    Ok((params, header.meta))
}
