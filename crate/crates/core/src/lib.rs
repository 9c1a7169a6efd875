//! Visual prompting with external knowledge for a small multimodal model.
//!
//! Pixel-level knowledge (segment masks with class labels, OCR boxes with
//! text) is rasterized into an auxiliary prompt of text embeddings, encoded
//! by a small convolutional network, fused into the vision tokens of a
//! frozen backbone, and trained with LoRA adapters on the decoder.

pub mod archive;
pub mod config;
pub mod io;
pub mod knowledge;
pub mod math;
pub mod model;
pub mod nn;
pub mod pen;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod text_embed;
pub mod train;
