//! Text encoders mapping class labels and OCR strings to embedding vectors.
//!
//! Two providers exist. [`HashEncoder`] derives a unit vector from SHA-256 in
//! counter mode and needs no model; [`TableEncoder`] serves vectors exported
//! offline from a real sentence encoder, optionally falling back to hashing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("hash embedding of {0:?} is the zero vector")]
    ZeroVector(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("entry {key:?} has length {got}, table dim is {dim}")]
    DimensionMismatch { key: String, got: usize, dim: usize },
    #[error("no embedding for {0:?}")]
    UnknownText(String),
    #[error("embedding dimension must be positive")]
    ZeroDim,
}

/// A `d`-dimensional text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Vec<f64>);

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Anything that plays the role of the text encoder.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<TextEmbedding, EmbedError>;
}

/// Deterministic hash embedding of `text`.
pub fn hash_embed(text: &str, d: usize, salt: &str) -> Result<TextEmbedding, EmbedError> {
    if d == 0 {
        return Err(EmbedError::ZeroDim);
    }
    let mut seed_input = Vec::with_capacity(salt.len() + 1 + text.len());
    seed_input.extend_from_slice(salt.as_bytes());
    seed_input.push(0);
    seed_input.extend_from_slice(text.as_bytes());
    let seed = Sha256::digest(&seed_input);

    let mut raw = Vec::with_capacity(d);
    let mut counter: u32 = 0;
    while raw.len() < d {
        let mut block_input = seed.to_vec();
        block_input.extend_from_slice(&counter.to_be_bytes());
        let block = Sha256::digest(&block_input);
        for chunk in block.chunks_exact(4) {
            if raw.len() == d {
                break;
            }
            let u = u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            raw.push((u as f64 / 4_294_967_296.0) * 2.0 - 1.0);
        }
        counter += 1;
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbedError::ZeroVector(text.to_string()));
    }
    Ok(TextEmbedding(raw.into_iter().map(|v| v / norm).collect()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashEncoder {
    pub dim: usize,
    pub salt: String,
}

impl HashEncoder {
    pub fn new(dim: usize, salt: impl Into<String>) -> Self {
        HashEncoder { dim, salt: salt.into() }
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        hash_embed(text, self.dim, &self.salt)
    }
}

/// Precomputed embeddings keyed by exact string.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedTable {
    dim: usize,
    entries: BTreeMap<String, TextEmbedding>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbedTable {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        Ok(EmbedTable { dim, entries: BTreeMap::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&TextEmbedding> {
        self.entries.get(text)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Vec<f64>) -> Result<(), EmbedError> {
        let key = key.into();
        if key.is_empty() {
            return Err(EmbedError::SchemaViolation("empty key".into()));
        }
        if value.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { key, got: value.len(), dim: self.dim });
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::SchemaViolation(format!("entry {key:?} has non-finite values")));
        }
        self.entries.insert(key, TextEmbedding(value));
        Ok(())
    }

    /// Serialize; `serde_json` writes shortest round-trip decimal floats.
    pub fn to_json(&self) -> String {
        let wire = WireTable {
            dim: self.dim,
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect(),
        };
        serde_json::to_string(&wire).expect("table serializes")
    }
}

/// Parse an embedding table from `{"dim": d, "entries": {text: [f64; d]}}`.
pub fn load_table(bytes: &[u8]) -> Result<EmbedTable, EmbedError> {
    let wire: WireTable = serde_json::from_slice(bytes).map_err(|e| EmbedError::SchemaViolation(e.to_string()))?;
    let mut table = EmbedTable::new(wire.dim).map_err(|_| EmbedError::SchemaViolation("dim must be >= 1".into()))?;
    for (k, v) in wire.entries {
        table.insert(k, v)?;
    }
    Ok(table)
}

/// Miss policy for [`table_embed`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fallback {
    None,
    Hash { salt: String },
}

pub fn table_embed(table: &EmbedTable, text: &str, fallback: &Fallback) -> Result<TextEmbedding, EmbedError> {
    match (table.get(text), fallback) {
        (Some(v), _) => Ok(v.clone()),
        (None, Fallback::None) => Err(EmbedError::UnknownText(text.to_string())),
        (None, Fallback::Hash { salt }) => hash_embed(text, table.dim, salt),
    }
}

#[derive(Clone, Debug)]
pub struct TableEncoder {
    pub table: EmbedTable,
    pub fallback: Fallback,
}

impl TextEncoder for TableEncoder {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        table_embed(&self.table, text, &self.fallback)
    }
}
