//! External knowledge produced by segmentation and OCR models.
//!
//! Knowledge arrives as JSON: panoptic segments carry a run-length encoded
//! mask, a class label and a confidence; OCR regions carry a half-open pixel
//! box, the recognized text and a confidence. Parsing materializes every
//! region and enforces the structural invariants (mask dimensions, box
//! bounds, pairwise-disjoint segments).

use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("RLE counts sum to {actual}, expected {expected}")]
    RleLengthMismatch { expected: usize, actual: usize },
    #[error("RLE run {index} has zero length")]
    RleZeroRun { index: usize },
    #[error("OCR region {index} bbox {bbox:?} outside {width}x{height} image")]
    BboxOutOfBounds { index: usize, bbox: [usize; 4], width: usize, height: usize },
    #[error("segments {first} and {second} overlap")]
    OverlappingSegments { first: usize, second: usize },
    #[error("segment {index} mask is {got_h}x{got_w}, image is {height}x{width}")]
    MaskDimensionMismatch { index: usize, got_h: usize, got_w: usize, height: usize, width: usize },
    #[error("segment {index} mask is empty")]
    EmptyMask { index: usize },
}

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "bit count must equal height*width");
        BitMask { height, width, bits }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BitMask { height, width, bits: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRegion {
    pub mask: BitMask,
    pub class_label: String,
    pub confidence: f64,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x0 && col < self.x1 && row >= self.y0 && row < self.y1
    }

    fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcrRegion {
    pub bbox: BBox,
    pub text: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalKnowledge {
    pub image_height: usize,
    pub image_width: usize,
    pub segments: Vec<SegmentRegion>,
    pub ocr: Vec<OcrRegion>,
}

impl ExternalKnowledge {
    pub fn empty(image_height: usize, image_width: usize) -> Self {
        ExternalKnowledge { image_height, image_width, segments: Vec::new(), ocr: Vec::new() }
    }

    /// Copy with all OCR regions removed.
    pub fn without_ocr(&self) -> Self {
        ExternalKnowledge { ocr: Vec::new(), ..self.clone() }
    }
}

/// Decode a row-major run-length stream. Runs alternate starting from
/// `start_value`; only the first run may have length zero.
pub fn decode_rle(counts: &[u64], start_value: bool, height: usize, width: usize) -> Result<BitMask, KnowledgeError> {
    let expected = height * width;
    let actual: u64 = counts.iter().sum();
    if counts.is_empty() || actual != expected as u64 {
        return Err(KnowledgeError::RleLengthMismatch { expected, actual: actual as usize });
    }
    if let Some(index) = counts.iter().skip(1).position(|&c| c == 0) {
        return Err(KnowledgeError::RleZeroRun { index: index + 1 });
    }
    let mut bits = Vec::with_capacity(expected);
    let mut value = start_value;
    for &c in counts {
        bits.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Ok(BitMask::new(height, width, bits))
}

/// Canonical encoding: `start_value` is always 0, with a leading zero run
/// when the first pixel is set.
pub fn encode_rle(mask: &BitMask) -> (bool, Vec<u64>) {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &b in &mask.bits {
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    (false, counts)
}

/// Check every invariant of `k` against an `height × width` image.
pub fn validate_knowledge(k: &ExternalKnowledge, height: usize, width: usize) -> Result<(), KnowledgeError> {
    if k.image_height != height || k.image_width != width {
        return Err(KnowledgeError::SchemaViolation(format!(
            "knowledge is for a {}x{} image, expected {height}x{width}",
            k.image_height, k.image_width
        )));
    }
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    for (index, seg) in k.segments.iter().enumerate() {
        if seg.class_label.is_empty() {
            return Err(KnowledgeError::SchemaViolation(format!("segment {index} has an empty class")));
        }
        check_confidence(seg.confidence, "segment", index)?;
        if seg.mask.height != height || seg.mask.width != width {
            return Err(KnowledgeError::MaskDimensionMismatch {
                index,
                got_h: seg.mask.height,
                got_w: seg.mask.width,
                height,
                width,
            });
        }
        if seg.mask.count() == 0 {
            return Err(KnowledgeError::EmptyMask { index });
        }
        for (px, &b) in seg.mask.bits.iter().enumerate() {
            if b {
                if let Some(first) = owner[px] {
                    return Err(KnowledgeError::OverlappingSegments { first, second: index });
                }
                owner[px] = Some(index);
            }
        }
    }
    for (index, r) in k.ocr.iter().enumerate() {
        if r.text.is_empty() {
            return Err(KnowledgeError::SchemaViolation(format!("ocr region {index} has empty text")));
        }
        check_confidence(r.confidence, "ocr region", index)?;
        let b = r.bbox;
        if !(b.x0 < b.x1 && b.x1 <= width && b.y0 < b.y1 && b.y1 <= height) {
            return Err(KnowledgeError::BboxOutOfBounds { index, bbox: b.as_array(), width, height });
        }
    }
    Ok(())
}

fn check_confidence(c: f64, what: &str, index: usize) -> Result<(), KnowledgeError> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(KnowledgeError::SchemaViolation(format!("{what} {index} confidence {c} outside [0,1]")))
    }
}

// Wire format. Numbers are read as f64 and range-checked afterwards.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireDoc {
    image: WireImage,
    segments: Vec<WireSegment>,
    ocr: Vec<WireOcr>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireImage {
    height: f64,
    width: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSegment {
    class: String,
    confidence: f64,
    mask_rle: WireRle,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRle {
    order: String,
    start_value: f64,
    counts: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireOcr {
    text: String,
    confidence: f64,
    bbox: Vec<f64>,
}

fn as_count(v: f64, what: &str) -> Result<usize, KnowledgeError> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= 9.007_199_254_740_992e15 {
        Ok(v as usize)
    } else {
        Err(KnowledgeError::SchemaViolation(format!("{what} must be a nonnegative integer, got {v}")))
    }
}

/// Parse and validate a knowledge document.
pub fn parse_knowledge(bytes: &[u8]) -> Result<ExternalKnowledge, KnowledgeError> {
    let doc: WireDoc = serde_json::from_slice(bytes).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => KnowledgeError::SchemaViolation(e.to_string()),
        _ => KnowledgeError::MalformedJson(e.to_string()),
    })?;
    let height = as_count(doc.image.height, "image.height")?;
    let width = as_count(doc.image.width, "image.width")?;

    let mut segments = Vec::with_capacity(doc.segments.len());
    for (i, s) in doc.segments.into_iter().enumerate() {
        if s.mask_rle.order != "row-major" {
            return Err(KnowledgeError::SchemaViolation(format!(
                "segment {i}: unsupported mask order {:?}",
                s.mask_rle.order
            )));
        }
        let start_value = match s.mask_rle.start_value {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            v => return Err(KnowledgeError::SchemaViolation(format!("segment {i}: start_value {v} not 0|1"))),
        };
        let counts = s
            .mask_rle
            .counts
            .iter()
            .map(|&c| as_count(c, "RLE count").map(|c| c as u64))
            .collect::<Result<Vec<_>, _>>()?;
        let mask = decode_rle(&counts, start_value, height, width)?;
        segments.push(SegmentRegion { mask, class_label: s.class, confidence: s.confidence });
    }

    let mut ocr = Vec::with_capacity(doc.ocr.len());
    for (i, o) in doc.ocr.into_iter().enumerate() {
        if o.bbox.len() != 4 {
            return Err(KnowledgeError::SchemaViolation(format!("ocr {i}: bbox needs 4 entries")));
        }
        let c = o.bbox.iter().map(|&v| as_count(v, "bbox coordinate")).collect::<Result<Vec<_>, _>>()?;
        ocr.push(OcrRegion {
            bbox: BBox { x0: c[0], y0: c[1], x1: c[2], y1: c[3] },
            text: o.text,
            confidence: o.confidence,
        });
    }

    let k = ExternalKnowledge { image_height: height, image_width: width, segments, ocr };
    validate_knowledge(&k, height, width)?;
    Ok(k)
}

/// Serialize to the JSON wire format using canonical RLE.
pub fn serialize_knowledge(k: &ExternalKnowledge) -> String {
    let segments: Vec<_> = k
        .segments
        .iter()
        .map(|s| {
            let (start, counts) = encode_rle(&s.mask);
            json!({
                "class": s.class_label,
                "confidence": s.confidence,
                "mask_rle": {"order": "row-major", "start_value": u8::from(start), "counts": counts},
            })
        })
        .collect();
    let ocr: Vec<_> = k
        .ocr
        .iter()
        .map(|o| json!({"text": o.text, "confidence": o.confidence, "bbox": o.bbox.as_array()}))
        .collect();
    json!({
        "image": {"height": k.image_height, "width": k.image_width},
        "segments": segments,
        "ocr": ocr,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_parses() {
        let k = parse_knowledge(br#"{"image":{"height":4,"width":4},"segments":[],"ocr":[]}"#).unwrap();
        assert_eq!((k.image_height, k.image_width), (4, 4));
        assert!(k.segments.is_empty() && k.ocr.is_empty());
    }

    #[test]
    fn short_rle_is_rejected() {
        let doc = br#"{"image":{"height":4,"width":4},"segments":[{"class":"cat","confidence":0.9,
            "mask_rle":{"order":"row-major","start_value":0,"counts":[5,1,9]}}],"ocr":[]}"#;
        assert_eq!(
            parse_knowledge(doc).unwrap_err(),
            KnowledgeError::RleLengthMismatch { expected: 16, actual: 15 }
        );
    }

    #[test]
    fn overlapping_segments_are_rejected() {
        let doc = br#"{"image":{"height":4,"width":4},"segments":[
            {"class":"cat","confidence":0.9,"mask_rle":{"order":"row-major","start_value":0,"counts":[5,1,10]}},
            {"class":"dog","confidence":0.9,"mask_rle":{"order":"row-major","start_value":0,"counts":[4,2,10]}}],"ocr":[]}"#;
        assert_eq!(parse_knowledge(doc).unwrap_err(), KnowledgeError::OverlappingSegments { first: 0, second: 1 });
    }

    #[test]
    fn rle_examples() {
        let m = decode_rle(&[16], false, 4, 4).unwrap();
        assert_eq!(m.count(), 0);
        let m = decode_rle(&[5, 1, 10], false, 4, 4).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 1));
        let m = decode_rle(&[0, 3, 13], false, 4, 4).unwrap();
        assert!(m.get(0, 0) && m.get(0, 2) && !m.get(0, 3));
        assert_eq!(decode_rle(&[3, 0, 13], false, 4, 4).unwrap_err(), KnowledgeError::RleZeroRun { index: 1 });
        assert!(matches!(decode_rle(&[], false, 0, 0), Err(KnowledgeError::RleLengthMismatch { .. })));
    }

    #[test]
    fn schema_violations() {
        let cases: [&[u8]; 6] = [
            br#"{"image":{"height":4,"width":4},"segments":[],"ocr":[],"extra":1}"#,
            br#"{"image":{"height":4,"width":4},"segments":[]}"#,
            br#"{"image":{"height":"4","width":4},"segments":[],"ocr":[]}"#,
            br#"{"image":{"height":4.5,"width":4},"segments":[],"ocr":[]}"#,
            br#"{"image":{"height":4,"width":4},"segments":[],"ocr":[{"text":"","confidence":1,"bbox":[0,0,1,1]}]}"#,
            br#"{"image":{"height":4,"width":4},"segments":[],"ocr":[{"text":"a","confidence":1.5,"bbox":[0,0,1,1]}]}"#,
        ];
        for c in cases {
            assert!(
                matches!(parse_knowledge(c), Err(KnowledgeError::SchemaViolation(_))),
                "{}",
                String::from_utf8_lossy(c)
            );
        }
        assert!(matches!(parse_knowledge(b"{not json"), Err(KnowledgeError::MalformedJson(_))));
    }

    #[test]
    fn bbox_bounds() {
        let mut k = ExternalKnowledge::empty(8, 8);
        k.ocr.push(OcrRegion { bbox: BBox { x0: 0, y0: 0, x1: 9, y1: 4 }, text: "a".into(), confidence: 1.0 });
        assert!(matches!(validate_knowledge(&k, 8, 8), Err(KnowledgeError::BboxOutOfBounds { index: 0, .. })));
        k.ocr[0].bbox.x1 = 8;
        validate_knowledge(&k, 8, 8).unwrap();
        k.ocr[0].bbox.x0 = 8;
        assert!(matches!(validate_knowledge(&k, 8, 8), Err(KnowledgeError::BboxOutOfBounds { .. })));
    }

    #[test]
    fn mask_dimension_and_empty_mask() {
        let mut k = ExternalKnowledge::empty(8, 8);
        let mut mask = BitMask::empty(8, 8);
        mask.set(2, 3, true);
        k.segments.push(SegmentRegion { mask, class_label: "cat".into(), confidence: 0.7 });
        validate_knowledge(&k, 8, 8).unwrap();
        assert!(matches!(validate_knowledge(&k, 4, 4), Err(KnowledgeError::SchemaViolation(_))));
        k.segments[0].mask = BitMask::empty(8, 8);
        assert_eq!(validate_knowledge(&k, 8, 8).unwrap_err(), KnowledgeError::EmptyMask { index: 0 });
        k.segments[0].mask = BitMask::empty(4, 8);
        assert!(matches!(validate_knowledge(&k, 8, 8), Err(KnowledgeError::MaskDimensionMismatch { .. })));
    }
}
