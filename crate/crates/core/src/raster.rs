//! Rasterization of external knowledge into the auxiliary prompt tensor.

use std::collections::HashMap;

use thiserror::Error;

use crate::knowledge::ExternalKnowledge;
use crate::text_embed::{EmbedError, TextEncoder};

/// Confidence gate applied to both segments and OCR regions.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("encoder dimension {encoder} does not match prompt dimension {expected}")]
    DimensionMismatch { encoder: usize, expected: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// `H × W × d` tensor of per-pixel text embeddings, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryPrompt {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl AuxiliaryPrompt {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        AuxiliaryPrompt { height, width, dim, data: vec![0.0; height * width * dim] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.dim;
        &self.data[o..o + self.dim]
    }

    fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.dim;
        &mut self.data[o..o + self.dim]
    }
}

/// Fill a zero tensor from `k`: accepted segments assign their class
/// embedding over the mask, then accepted OCR regions add their text
/// embedding over the box in input order. Regions below `tau` leave zeros.
pub fn build_prompt(
    k: &ExternalKnowledge,
    encoder: &dyn TextEncoder,
    dim: usize,
    tau: f64,
) -> Result<AuxiliaryPrompt, RasterError> {
    if encoder.dim() != dim {
        return Err(RasterError::DimensionMismatch { encoder: encoder.dim(), expected: dim });
    }
    let (h, w) = (k.image_height, k.image_width);
    let mut p = AuxiliaryPrompt::zeros(h, w, dim);
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();

    for seg in k.segments.iter().filter(|s| s.confidence >= tau) {
        let t = embed_cached(&mut cache, encoder, &seg.class_label, dim)?;
        for (idx, _) in seg.mask.bits().iter().enumerate().filter(|(_, &b)| b) {
            p.pixel_mut(idx / w, idx % w).copy_from_slice(&t);
        }
    }
    for r in k.ocr.iter().filter(|r| r.confidence >= tau) {
        let t = embed_cached(&mut cache, encoder, &r.text, dim)?;
        for row in r.bbox.y0..r.bbox.y1 {
            for col in r.bbox.x0..r.bbox.x1 {
                for (dst, &v) in p.pixel_mut(row, col).iter_mut().zip(&t) {
                    *dst += v;
                }
            }
        }
    }
    Ok(p)
}

fn embed_cached<'k>(
    cache: &mut HashMap<&'k str, Vec<f64>>,
    encoder: &dyn TextEncoder,
    text: &'k str,
    dim: usize,
) -> Result<Vec<f64>, RasterError> {
    if !cache.contains_key(text) {
        let v = encoder.embed(text)?;
        if v.dim() != dim {
            return Err(RasterError::DimensionMismatch { encoder: v.dim(), expected: dim });
        }
        cache.insert(text, v.0);
    }
    Ok(cache[text].clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptStats {
    pub nonzero_fraction: f64,
    /// (min, max) of per-pixel L2 norms over channels.
    pub norm_extremes: (f64, f64),
    pub channel_means: Vec<f64>,
}

pub fn prompt_stats(p: &AuxiliaryPrompt) -> PromptStats {
    let pixels = p.height * p.width;
    let mut nonzero = 0usize;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sums = vec![0.0; p.dim];
    for px in p.data.chunks_exact(p.dim.max(1)).take(pixels) {
        if px.iter().any(|&v| v != 0.0) {
            nonzero += 1;
        }
        let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        min = min.min(n);
        max = max.max(n);
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v;
        }
    }
    if pixels == 0 {
        return PromptStats { nonzero_fraction: 0.0, norm_extremes: (0.0, 0.0), channel_means: sums };
    }
    PromptStats {
        nonzero_fraction: nonzero as f64 / pixels as f64,
        norm_extremes: (min, max),
        channel_means: sums.into_iter().map(|s| s / pixels as f64).collect(),
    }
}
