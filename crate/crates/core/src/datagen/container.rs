//! Directory container: `manifest.json` (UTF-8) plus one little-endian blob.
//!
//! The manifest lists every array with its dtype, shape, byte offset and byte
//! length inside `data.bin`. Arrays are packed back to back in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GinotError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.bin";
pub const FORMAT: &str = "ginot-container";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    I64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F64(_) => DType::F64,
            ArrayData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::I64(data),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            ArrayData::I64(_) => Err(GinotError::Container(format!(
                "array `{}` is i64, expected f64",
                self.name
            ))),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            ArrayData::I64(v) => Ok(v),
            ArrayData::F64(_) => Err(GinotError::Container(format!(
                "array `{}` is f64, expected i64",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub blob: String,
    pub blob_bytes: u64,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| GinotError::Container(format!("missing array `{name}`")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(GinotError::Container(format!(
                    "array `{}`: shape {:?} holds {n} elements, data has {}",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
            let offset = blob.len() as u64;
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: a.data.dtype(),
                shape: a.shape.clone(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
            blob: BLOB_FILE.into(),
            blob_bytes: blob.len() as u64,
            arrays: entries,
        };
        let mut f = fs::File::create(dir.join(BLOB_FILE))?;
        f.write_all(&blob)?;
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| GinotError::Container(format!("corrupt manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(GinotError::Container(format!(
                "unsupported container {} v{}",
                manifest.format, manifest.version
            )));
        }
        let blob = fs::read(dir.join(&manifest.blob))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(GinotError::Container(format!(
                "offset error: blob has {} bytes, manifest expects {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        let mut cursor = 0u64;
        for e in &manifest.arrays {
            let n: usize = e.shape.iter().product();
            if e.offset < cursor {
                return Err(GinotError::Container(format!(
                    "offset error: array `{}` at {} overlaps the previous array ending at {cursor}",
                    e.name, e.offset
                )));
            }
            if e.length != 8 * n as u64 {
                return Err(GinotError::Container(format!(
                    "array `{}`: shape {:?} needs {} bytes, manifest says {}",
                    e.name,
                    e.shape,
                    8 * n,
                    e.length
                )));
            }
            let end = e.offset.checked_add(e.length).unwrap_or(u64::MAX);
            if end > blob.len() as u64 {
                return Err(GinotError::Container(format!(
                    "offset error: array `{}` ends at {end}, blob has {} bytes",
                    e.name,
                    blob.len()
                )));
            }
            cursor = end;
            let bytes = &blob[e.offset as usize..end as usize];
            let words = bytes.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
            let data = match e.dtype {
                DType::F64 => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
                DType::I64 => ArrayData::I64(words.map(i64::from_le_bytes).collect()),
            };
            arrays.push(NamedArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "test"}));
        c.push(NamedArray::f64("a", vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]));
        c.push(NamedArray::i64("idx", vec![3], vec![-1, 0, i64::MAX]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.write(dir.path()).unwrap();
        let back = Container::read(dir.path()).unwrap();
        assert_eq!(back.meta, c.meta);
        let a = back.get("a").unwrap().as_f64().unwrap();
        let want = c.get("a").unwrap().as_f64().unwrap();
        assert!(a.iter().zip(want).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.get("idx").unwrap().as_i64().unwrap(), &[-1, 0, i64::MAX]);
    }

    #[test]
    fn truncated_blob_is_an_offset_error() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = Container::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        let err = Container::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("corrupt manifest"));
    }

    #[test]
    fn shape_mismatch_refused_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::new(serde_json::Value::Null);
        c.push(NamedArray::f64("bad", vec![3], vec![1.0]));
        assert!(c.write(dir.path()).is_err());
    }
}
