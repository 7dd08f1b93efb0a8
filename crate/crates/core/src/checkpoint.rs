//! Checkpoint container: `<name>.ckpt.json` manifest + `<name>.ckpt.bin` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{Origin, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    frozen: bool,
    origin: Origin,
}

/// Loaded checkpoint: tensors plus the free-form metadata stored with them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

/// The stem of a checkpoint path, accepting `x`, `x.ckpt.json` or `x.ckpt.bin`.
pub fn checkpoint_stem(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".ckpt.json", ".ckpt.bin"] {
        if let Some(stem) = s.strip_suffix(suffix) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(&checkpoint_stem(path), ".ckpt.json")
}

pub fn blob_path(path: &Path) -> PathBuf {
    with_suffix(&checkpoint_stem(path), ".ckpt.bin")
}

/// Serialises to the manifest and blob byte strings without touching disk.
pub fn encode(params: &ParamStore, meta: &serde_json::Value) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::with_capacity(params.total_elements() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        tensors.push(Entry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32le".into(),
            offset: blob.len() as u64,
            frozen: p.frozen,
            origin: p.origin,
        });
        blob.extend_from_slice(&p.value.to_le_bytes());
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    Ok((json, blob))
}

pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Checkpoint> {
    let m: Manifest = serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unknown checkpoint format version {}", m.format_version)));
    }
    let mut params = ParamStore::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        if e.dtype != "f32le" {
            return Err(Error::Format(format!("`{}`: unsupported dtype `{}`", e.name, e.dtype)));
        }
        if params.contains(&e.name) {
            return Err(Error::Integrity(format!("duplicate tensor `{}`", e.name)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset;
        let end = start
            .checked_add(n as u64 * 4)
            .ok_or_else(|| Error::Integrity(format!("`{}`: offset overflow", e.name)))?;
        if end > blob.len() as u64 {
            return Err(Error::Integrity(format!(
                "`{}` spans bytes {start}..{end} but the blob has {}",
                e.name,
                blob.len()
            )));
        }
        spans.push((start, end, &e.name));
        let data: Vec<f32> = blob[start as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.origin, e.frozen);
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Integrity(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok(Checkpoint { meta: m.meta, params })
}

pub fn save_checkpoint(params: &ParamStore, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let (json, blob) = encode(params, meta)?;
    let mp = manifest_path(path);
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    let bp = blob_path(path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mp = manifest_path(path);
    let json = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    decode(&json, &blob)
}

/// SHA-256 over manifest then blob.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for p in [manifest_path(path), blob_path(path)] {
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap(), Origin::Pretrained, true);
        s.insert("b", Tensor::new(vec![1], vec![0.25]).unwrap(), Origin::New, false);
        s
    }

    #[test]
    fn roundtrip_keeps_flags() {
        let (j, b) = encode(&store(), &serde_json::json!({"seed": 3})).unwrap();
        let c = decode(&j, &b).unwrap();
        assert_eq!(c.meta["seed"], 3);
        let p = c.params.get("a.weight").unwrap();
        assert!(p.frozen);
        assert_eq!(p.origin, Origin::Pretrained);
        assert_eq!(p.value.data()[4], f32::MIN_POSITIVE);
        assert!(!c.params.get("b").unwrap().frozen);
    }

    #[test]
    fn truncated_blob_rejected() {
        let (j, b) = encode(&store(), &serde_json::Value::Null).unwrap();
        assert!(matches!(decode(&j, &b[..b.len() - 1]), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let (j, b) = encode(&store(), &serde_json::Value::Null).unwrap();
        let text = String::from_utf8(j).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(decode(text.as_bytes(), &b), Err(Error::Format(_))));
    }

    #[test]
    fn repeated_saves_hash_equal() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("x"), dir.path().join("y"));
        save_checkpoint(&store(), &serde_json::Value::Null, &p1).unwrap();
        save_checkpoint(&store(), &serde_json::Value::Null, &p2).unwrap();
        assert_eq!(checkpoint_hash(&p1).unwrap(), checkpoint_hash(&p2).unwrap());
    }
}
