//! VPKT tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VPKTNS01" | u32 manifest_len | manifest (UTF-8 JSON) | data section
//! ```
//!
//! The manifest is a JSON array of `{name, dtype, shape, offset, nbytes}`
//! objects; `offset` is relative to the start of the data section. `f32` is
//! the only dtype.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VPKTNS01";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("shape {shape:?} needs {expected} bytes, got {got}")]
    SizeMismatch { shape: Vec<usize>, expected: usize, got: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("manifest corrupt: {0}")]
    ManifestCorrupt(String),
    #[error("tensor {name:?} extends past end of file")]
    TruncatedData { name: String },
    #[error("tensor {0:?} not found")]
    Missing(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One `f32` tensor stored as raw little-endian bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl TensorEntry {
    pub fn new(shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self, ArchiveError> {
        let expected = 4 * shape.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(ArchiveError::SizeMismatch { shape, expected, got: bytes.len() });
        }
        Ok(TensorEntry { shape, bytes })
    }

    pub fn from_f32(shape: &[usize], values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorEntry { shape: shape.to_vec(), bytes }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let values: Vec<f32> = t.data.iter().map(|v| v.as_f64() as f32).collect();
        Self::from_f32(&t.shape, &values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(&self.shape, self.to_f32().into_iter().map(|v| T::lit(v as f64)).collect())
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TensorArchive {
    pub entries: Vec<(String, TensorEntry)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, entry: TensorEntry) {
        self.entries.push((name.into(), entry));
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.push(name, TensorEntry::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry, ArchiveError> {
        self.get(name).ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn write_file(&self, path: &Path) -> Result<(), ArchiveError> {
        let bytes = save_archive(self)?;
        crate::io::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, ArchiveError> {
        load_archive(&std::fs::read(path)?)
    }
}

pub fn save_archive(archive: &TensorArchive) -> Result<Vec<u8>, ArchiveError> {
    let mut seen = std::collections::HashSet::new();
    let mut manifest = Vec::with_capacity(archive.entries.len());
    let mut offset = 0u64;
    for (name, e) in &archive.entries {
        if !seen.insert(name.as_str()) {
            return Err(ArchiveError::DuplicateName(name.clone()));
        }
        manifest.push(ManifestItem {
            name: name.clone(),
            dtype: "f32".into(),
            shape: e.shape.clone(),
            offset,
            nbytes: e.bytes.len() as u64,
        });
        offset += e.bytes.len() as u64;
    }
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, e) in &archive.entries {
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

pub fn load_archive(bytes: &[u8]) -> Result<TensorArchive, ArchiveError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(ArchiveError::ManifestCorrupt("missing manifest length".into()));
    }
    let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let data_start = 12usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ArchiveError::ManifestCorrupt("manifest length exceeds file".into()))?;
    let manifest: Vec<ManifestItem> = serde_json::from_slice(&bytes[12..data_start])
        .map_err(|e| ArchiveError::ManifestCorrupt(e.to_string()))?;
    let data = &bytes[data_start..];

    let mut archive = TensorArchive::new();
    let mut seen = std::collections::HashSet::new();
    let mut cursor = 0u64;
    for item in manifest {
        if item.dtype != "f32" {
            return Err(ArchiveError::ManifestCorrupt(format!("unsupported dtype {:?}", item.dtype)));
        }
        if !seen.insert(item.name.clone()) {
            return Err(ArchiveError::ManifestCorrupt(format!("duplicate name {:?}", item.name)));
        }
        let expected = 4 * item.shape.iter().product::<usize>() as u64;
        if item.nbytes != expected {
            return Err(ArchiveError::ManifestCorrupt(format!(
                "{:?}: nbytes {} does not match shape {:?}",
                item.name, item.nbytes, item.shape
            )));
        }
        if item.offset < cursor {
            return Err(ArchiveError::ManifestCorrupt(format!("{:?}: offsets not ascending", item.name)));
        }
        let end = item.offset.checked_add(item.nbytes).filter(|&e| e <= data.len() as u64);
        let Some(end) = end else {
            return Err(ArchiveError::TruncatedData { name: item.name });
        };
        let slice = data[item.offset as usize..end as usize].to_vec();
        archive.push(item.name, TensorEntry { shape: item.shape, bytes: slice });
        cursor = end;
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_archive_layout() {
        let bytes = save_archive(&TensorArchive::new()).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..], b"[]");
        assert_eq!(load_archive(&bytes).unwrap(), TensorArchive::new());
    }

    #[test]
    fn size_is_checked_at_construction() {
        assert!(matches!(
            TensorEntry::new(vec![2, 3], vec![0; 20]),
            Err(ArchiveError::SizeMismatch { expected: 24, got: 20, .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = TensorArchive::new();
        a.push("x", TensorEntry::from_f32(&[1], &[1.0]));
        a.push("x", TensorEntry::from_f32(&[1], &[2.0]));
        assert!(matches!(save_archive(&a), Err(ArchiveError::DuplicateName(n)) if n == "x"));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(load_archive(b"NOTMAGIC\0\0\0\0"), Err(ArchiveError::BadMagic)));
        let mut a = TensorArchive::new();
        a.push("w", TensorEntry::from_f32(&[2], &[1.0, 2.0]));
        let bytes = save_archive(&a).unwrap();
        assert!(matches!(load_archive(&bytes[..bytes.len() - 1]), Err(ArchiveError::TruncatedData { .. })));
        let mut bad = bytes.clone();
        bad[12] = b'{';
        assert!(matches!(load_archive(&bad), Err(ArchiveError::ManifestCorrupt(_))));
        let mut long = bytes[..12].to_vec();
        long[8..12].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(load_archive(&long), Err(ArchiveError::ManifestCorrupt(_))));
    }
}
