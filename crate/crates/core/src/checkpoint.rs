//! Versioned tensor container.
//!
//! Layout: the 8-byte magic `PSEGCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every
//! tensor's raw little-endian bytes in manifest (name) order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::nn::{tensor_le_bytes, ParamSet};

pub const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub const BACKBONE_NS: &str = "backbone/";
pub const HEAD_NS: &str = "head/";
pub const SCENE_TOKEN: &str = "prompt/scene_token";
pub const CATEGORY_TOKENS: &str = "prompt/category_tokens";
pub const TTDA_SCENE_TOKEN: &str = "ttda/scene_token";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `"f32"` or `"f64"`; a container holds a single precision.
    pub precision: String,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 per top-level namespace (the part of the name before the first `/`).
    pub digests: BTreeMap<String, String>,
    /// SHA-256 of the backbone parameters, when present.
    pub freeze_digest: Option<String>,
    pub metadata: serde_json::Value,
}

fn precision_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn namespace_of(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

/// Per-namespace digests, computed exactly like [`ParamSet::digest`].
pub fn namespace_digests(tensors: &ParamSet) -> Result<BTreeMap<String, String>> {
    let mut hashers: BTreeMap<String, Sha256> = BTreeMap::new();
    for (name, t) in tensors.iter() {
        hashers
            .entry(namespace_of(name).to_string())
            .or_default()
            .update(tensor_le_bytes(t)?);
    }
    Ok(hashers.into_iter().map(|(k, h)| (k, hex::encode(h.finalize()))).collect())
}

pub fn encode(tensors: &ParamSet, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut dtype = None;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors.iter() {
        match dtype {
            None => dtype = Some(t.dtype()),
            Some(d) if d != t.dtype() => {
                return Err(Error::Checkpoint(format!("mixed precision in checkpoint at {name}")));
            }
            _ => {}
        }
        let bytes = tensor_le_bytes(t)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset: payload.len() as u64,
            nbytes: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let backbone = tensors.strip_prefix(BACKBONE_NS);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: precision_name(dtype.unwrap_or(DType::F32))?.to_string(),
        tensors: entries,
        digests: namespace_digests(tensors)?,
        freeze_digest: if backbone.is_empty() { None } else { Some(backbone.digest()?) },
        metadata,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamSet, Manifest)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..body])?;
    let payload = &bytes[body..];
    let (dtype, width) = match manifest.precision.as_str() {
        "f32" => (DType::F32, 4usize),
        "f64" => (DType::F64, 8usize),
        p => return Err(Error::Checkpoint(format!("unknown precision {p}"))),
    };
    let mut ps = ParamSet::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.nbytes as usize != n * width {
            return Err(Error::Checkpoint(format!("size mismatch for {}", e.name)));
        }
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        let raw = payload.get(start..end).ok_or_else(|| bad("truncated tensor data"))?;
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            _ => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
        };
        ps.insert(e.name.clone(), t);
    }
    let digests = namespace_digests(&ps)?;
    for (ns, want) in &manifest.digests {
        let got = digests.get(ns).cloned().unwrap_or_default();
        if &got != want {
            return Err(Error::DigestMismatch {
                name: format!("checkpoint namespace {ns}"),
                expected: want.clone(),
                found: got,
            });
        }
    }
    Ok((ps, manifest))
}

pub fn save(path: &Path, tensors: &ParamSet, metadata: serde_json::Value) -> Result<()> {
    let bytes = encode(tensors, metadata)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, Manifest)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}
