//! MYQT tensor files and sample-set directories.
//!
//! ```text
//! offset    size      field
//! 0         4         magic "MYQT"
//! 4         4         version, u32 LE (= 1)
//! 8         4         ndim, u32 LE
//! 12        8·ndim    dims, u64 LE each
//! 12+8·ndim 1         dtype code: 0 = f32, 1 = f64
//! ...       ...       raw little-endian data, row-major
//! ```
//!
//! A sample set is a directory holding `manifest.json`, which lists the
//! tensor files in order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{write_atomic, write_blob, BlobMeta, BlobReader};
use crate::tensor::{DType, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"MYQT";
pub const TENSOR_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
const MAX_NDIM: u32 = 16;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * t.ndim() + t.len() * t.dtype().size_bytes());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(dtype_code(t.dtype()));
    write_blob(&mut out, t);
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = BlobReader::new(bytes, 0);
    if r.take(4, "magic").ok() != Some(&TENSOR_MAGIC[..]) {
        return Err(Error::format(0, "bad magic: expected \"MYQT\""));
    }
    let u32_at = |r: &mut BlobReader, what| -> Result<u32> {
        Ok(u32::from_le_bytes(r.take(4, what)?.try_into().expect("4 bytes")))
    };
    let version = u32_at(&mut r, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {TENSOR_VERSION}")));
    }
    let ndim = u32_at(&mut r, "ndim")?;
    if ndim > MAX_NDIM {
        return Err(Error::format(8, format!("ndim {ndim} exceeds {MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let at = r.offset();
        let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::format(at, format!("dimension {d} too large")))?);
    }
    let at = r.offset();
    let dtype = match r.take(1, "dtype code")?[0] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(Error::format(at, format!("unknown dtype code {c}"))),
    };
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size_bytes()))
        .ok_or_else(|| Error::format(at, format!("shape {shape:?} overflows")))?;
    let meta = BlobMeta {
        shape,
        dtype,
        bytes: count as u64,
    };
    let t = r.tensor(&meta, "tensor data")?;
    r.finish()?;
    Ok(t)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &tensor_to_bytes(t))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub files: Vec<String>,
}

/// Writes `samples` as `sample_NNNNN.myqt` plus a manifest, creating `dir`.
pub fn write_samples(dir: impl AsRef<Path>, samples: &[Tensor]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(samples.len());
    let mut paths = Vec::with_capacity(samples.len());
    for (i, t) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.myqt");
        let path = dir.join(&name);
        save_tensor(t, &path)?;
        files.push(name);
        paths.push(path);
    }
    let manifest = Manifest {
        version: TENSOR_VERSION,
        files,
    };
    write_atomic(&dir.join(MANIFEST_NAME), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(paths)
}

/// Reads the sample set in manifest order.
pub fn read_samples(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read(&mpath).map_err(|e| Error::Usage(format!("cannot read {}: {e}", mpath.display())))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.version != TENSOR_VERSION {
        return Err(Error::Usage(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.files.is_empty() {
        return Err(Error::Usage(format!("{} lists no samples", mpath.display())));
    }
    manifest
        .files
        .iter()
        .map(|f| {
            if Path::new(f).components().count() != 1 {
                return Err(Error::Usage(format!("manifest entry {f:?} must be a plain file name")));
            }
            load_tensor(dir.join(f)).map_err(|e| match e {
                Error::Format { offset, message } => Error::Format {
                    offset,
                    message: format!("{f}: {message}"),
                },
                e => e,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_both_dtypes() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap();
        assert_eq!(tensor_from_bytes(&tensor_to_bytes(&a)).unwrap(), a);
        let b = Tensor::from_f32(vec![3], &[0.1, 0.2, -0.3]).unwrap();
        let back = tensor_from_bytes(&tensor_to_bytes(&b)).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.dtype(), DType::F32);
    }

    #[test]
    fn layout() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..4], b"MYQT");
        assert_eq!(b[4..8], 1u32.to_le_bytes());
        assert_eq!(b[8..12], 1u32.to_le_bytes());
        assert_eq!(b[12..20], 1u64.to_le_bytes());
        assert_eq!(b[20], 1);
        assert_eq!(b[21..], 1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let good = tensor_to_bytes(&t);
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(tensor_from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
        let mut code = good.clone();
        code[20] = 9;
        assert!(matches!(tensor_from_bytes(&code), Err(Error::Format { offset: 20, .. })));
        assert!(tensor_from_bytes(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(tensor_from_bytes(&extra).is_err());
    }

    #[test]
    fn sample_directory() {
        let dir = tempfile::tempdir().unwrap();
        let s: Vec<Tensor> = (0..3).map(|i| Tensor::new(vec![2], vec![i as f64, -(i as f64)]).unwrap()).collect();
        write_samples(dir.path(), &s).unwrap();
        assert_eq!(read_samples(dir.path()).unwrap(), s);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(read_samples(empty.path()), Err(Error::Usage(_))));
    }
}
