//! On-disk tensor container: a human-readable JSON manifest next to a raw
//! little-endian float blob.
//!
//! A container named `stem` lives at `stem.manifest.json` + `stem.f32` (or
//! `stem.f64` for full-precision checkpoints).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightsManifest {
    pub version: u32,
    pub kind: String,
    pub dtype: Dtype,
    pub total_bytes: u64,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "manifest.json")
}

pub fn blob_path(stem: &Path, dtype: Dtype) -> PathBuf {
    with_suffix(stem, dtype.extension())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes named 2-D tensors. With `Dtype::F32` values are rounded to single
/// precision; `Dtype::F64` is lossless.
pub fn write_weights(
    stem: &Path,
    kind: &str,
    tensors: &BTreeMap<String, Array2<f64>>,
    dtype: Dtype,
    metadata: serde_json::Value,
) -> Result<WeightsManifest> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: vec![t.nrows(), t.ncols()],
            offset: blob.len() as u64,
        });
        match dtype {
            Dtype::F32 => encode_f32(t.iter().map(|&v| v as f32), &mut blob),
            Dtype::F64 => {
                for &v in t.iter() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let manifest = WeightsManifest {
        version: WEIGHTS_VERSION,
        kind: kind.to_string(),
        dtype,
        total_bytes: blob.len() as u64,
        metadata,
        tensors: entries,
    };
    atomic_write(&blob_path(stem, dtype), &blob)?;
    write_json(&manifest_path(stem), &manifest)?;
    Ok(manifest)
}

pub fn read_weights(stem: &Path) -> Result<(WeightsManifest, BTreeMap<String, Array2<f64>>)> {
    let mpath = manifest_path(stem);
    if !mpath.exists() {
        return Err(Error::MissingPath(mpath));
    }
    let manifest: WeightsManifest = read_json(&mpath)?;
    if manifest.version != WEIGHTS_VERSION {
        return Err(Error::Corrupt(format!(
            "unknown weights version {}",
            manifest.version
        )));
    }
    let bpath = blob_path(stem, manifest.dtype);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() as u64 != manifest.total_bytes {
        return Err(Error::Corrupt(format!(
            "blob {} holds {} bytes, manifest declares {}",
            bpath.display(),
            blob.len(),
            manifest.total_bytes
        )));
    }
    let width = manifest.dtype.width();
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let (rows, cols) = match e.shape.as_slice() {
            [r, c] => (*r, *c),
            other => return Err(Error::Corrupt(format!("{}: bad shape {other:?}", e.name))),
        };
        let start = e.offset as usize;
        let end = start + rows * cols * width;
        if end > blob.len() {
            return Err(Error::Corrupt(format!("{}: truncated blob", e.name)));
        }
        let bytes = &blob[start..end];
        let values: Vec<f64> = match manifest.dtype {
            Dtype::F32 => decode_f32(bytes).into_iter().map(f64::from).collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e2| Error::Corrupt(format!("{}: {e2}", e.name)))?;
        tensors.insert(e.name.clone(), t);
    }
    Ok((manifest, tensors))
}
