//! Volume container: a JSON sidecar plus raw little-endian payloads.
//!
//! `write_volume(s, "dir/case")` produces `dir/case.json`,
//! `dir/case.img.raw` (f32 LE) and `dir/case.msk.raw` (u8).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{numel, Dims, Grid3};

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub image: Grid3<f32>,
    pub mask: Grid3<u8>,
    /// Voxel edge lengths in millimetres, (z, y, x).
    pub spacing: [f64; 3],
    pub id: String,
}

impl VolumeSample {
    pub fn new(image: Grid3<f32>, mask: Grid3<u8>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        let s = Self {
            image,
            mask,
            spacing,
            id: id.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.dims() != self.mask.dims() {
            return Err(Error::Shape(format!(
                "image dims {:?} differ from mask dims {:?}",
                self.image.dims(),
                self.mask.dims()
            )));
        }
        if !self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.mask.data().iter().any(|&m| m > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// The stem of a volume path, accepting either `dir/case` or `dir/case.json`.
pub fn volume_stem(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    match s.strip_suffix(".json") {
        Some(stem) => PathBuf::from(stem),
        None => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_volume(sample: &VolumeSample, path: &Path) -> Result<()> {
    write_volume_with_meta(sample, path, None)
}

/// Writes a volume, embedding `meta` (e.g. a config fingerprint) in the sidecar.
pub fn write_volume_with_meta(sample: &VolumeSample, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
    sample.validate()?;
    let stem = volume_stem(path);
    let sidecar = Sidecar {
        dims: sample.dims(),
        spacing: sample.spacing,
        dtype: "f32le".into(),
        id: Some(sample.id.clone()),
        meta,
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    let img: Vec<u8> = sample.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    for (suffix, bytes) in [(".json", &json), (".img.raw", &img), (".msk.raw", &sample.mask.data().to_vec())] {
        let p = with_suffix(&stem, suffix);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    let stem = volume_stem(path);
    let sc_path = with_suffix(&stem, ".json");
    let text = fs::read(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
    let sc: Sidecar =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", sc_path.display())))?;
    if sc.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype `{}`", sc.dtype)));
    }
    let n = numel(sc.dims);
    let img_path = with_suffix(&stem, ".img.raw");
    let img = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    if img.len() != n * 4 {
        return Err(Error::Integrity(format!(
            "{}: dims {:?} need {} bytes, found {}",
            img_path.display(),
            sc.dims,
            n * 4,
            img.len()
        )));
    }
    let msk_path = with_suffix(&stem, ".msk.raw");
    let msk = fs::read(&msk_path).map_err(|e| Error::io(&msk_path, e))?;
    if msk.len() != n {
        return Err(Error::Integrity(format!(
            "{}: dims {:?} need {} bytes, found {}",
            msk_path.display(),
            sc.dims,
            n,
            msk.len()
        )));
    }
    let image: Vec<f32> = img.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let id = sc.id.unwrap_or_else(|| stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let sample = VolumeSample {
        image: Grid3::new(sc.dims, image)?,
        mask: Grid3::new(sc.dims, msk)?,
        spacing: sc.spacing,
        id,
    };
    sample.validate().map_err(|e| Error::Integrity(e.to_string()))?;
    Ok(sample)
}

/// Lists the volume stems (sidecars) in `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if name.ends_with(".json") && !name.ends_with(".ckpt.json") {
            let stem = volume_stem(&p);
            if with_suffix(&stem, ".img.raw").exists() {
                out.push(stem);
            }
        }
    }
    out.sort();
    Ok(out)
}
