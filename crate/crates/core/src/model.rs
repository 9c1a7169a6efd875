//! Desk-scale multimodal model.
//!
//! A patch-embedding vision encoder with a two-layer MLP projector produces
//! image tokens; the prompt embedding network and fusion (see [`crate::pen`])
//! inject the auxiliary prompt; a prefix-LM decoder reads
//! `[image tokens] ++ [question] ++ [answer]` and predicts text tokens.
//! Everything under `backbone.` is frozen during adapter training; the PEN,
//! the fusion linear and the LoRA adapters are trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{argmax, log_sum_exp, Real};
use crate::nn::{gelu, gelu_backward, normal_tensor, Block, BlockCache, LayerNorm, Linear, LnCache, LoraAdapter, LoraMap, LoraSite, Segment, LORA_SLOTS};
use crate::pen::{pen_init, FusionMode, FusionParams, PenCache, PenError, PenInit, PenParams, TokenFeatures};
use crate::tensor::{join, ParamSet, Tensor};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} positions exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no LoRA adapter named {0:?}")]
    UnknownAdapter(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: u32, vocab: usize },
    #[error(transparent)]
    Pen(#[from] PenError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Shared width of image tokens, prompt features and the decoder.
    pub d_model: usize,
    pub heads: usize,
    pub vision_blocks: usize,
    pub decoder_blocks: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Channel count of the auxiliary prompt (text embedding dimension).
    pub prompt_dim: usize,
    pub fusion: FusionMode,
    pub pen_init: PenInit,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Adapted matrices inside every decoder block, e.g. `"attn.q"`.
    pub lora_targets: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch: 4,
            d_model: 64,
            heads: 4,
            vision_blocks: 2,
            decoder_blocks: 2,
            mlp_hidden: 128,
            vocab_size: 64,
            max_len: 80,
            prompt_dim: 32,
            fusion: FusionMode::Addition,
            pen_init: PenInit::Kaiming,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: LORA_SLOTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelConfig {
    /// LoRA rank 128, alpha 256 and a 1024-dim text embedding, as used with
    /// multi-billion-parameter backbones. Not trainable on a laptop.
    pub fn full_scale_reference() -> Self {
        ModelConfig { lora_rank: 128, lora_alpha: 256.0, prompt_dim: 1024, ..Self::default() }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    pub fn num_image_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// RGB image with values in `[0, 1]`, `height × width × 3` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Image { height, width, data: rgb.iter().copied().cycle().take(height * width * 3).collect() }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let o = (row * self.width + col) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Question and answer token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenized {
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

impl Tokenized {
    pub fn text(&self) -> Vec<u32> {
        let mut t = self.question.clone();
        t.extend_from_slice(&self.answer);
        t
    }
}

// ------------------------------------------------------------- parameters

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub patch_embed: Linear<T>,
    /// Learned position of each grid token inside the image.
    pub vision_pos: Tensor<T>,
    pub vision_blocks: Vec<Block<T>>,
    pub vision_norm: LayerNorm<T>,
    pub projector_fc1: Linear<T>,
    pub projector_fc2: Linear<T>,
    pub token_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub decoder_blocks: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
    pub output_head: Linear<T>,
}

impl<T: Real> ParamSet<T> for Backbone<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "vision_pos"), &self.vision_pos));
        for (i, b) in self.vision_blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("vision.{i}")), out);
        }
        self.vision_norm.collect(&join(prefix, "vision_norm"), out);
        self.projector_fc1.collect(&join(prefix, "projector.fc1"), out);
        self.projector_fc2.collect(&join(prefix, "projector.fc2"), out);
        out.push((join(prefix, "token_embed"), &self.token_embed));
        out.push((join(prefix, "pos_embed"), &self.pos_embed));
        for (i, b) in self.decoder_blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.final_norm.collect(&join(prefix, "final_norm"), out);
        self.output_head.collect(&join(prefix, "output_head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "vision_pos"), &mut self.vision_pos));
        for (i, b) in self.vision_blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("vision.{i}")), out);
        }
        self.vision_norm.collect_mut(&join(prefix, "vision_norm"), out);
        self.projector_fc1.collect_mut(&join(prefix, "projector.fc1"), out);
        self.projector_fc2.collect_mut(&join(prefix, "projector.fc2"), out);
        out.push((join(prefix, "token_embed"), &mut self.token_embed));
        out.push((join(prefix, "pos_embed"), &mut self.pos_embed));
        for (i, b) in self.decoder_blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.final_norm.collect_mut(&join(prefix, "final_norm"), out);
        self.output_head.collect_mut(&join(prefix, "output_head"), out);
    }
}

/// Trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapters<T> {
    pub pen: PenParams<T>,
    pub fusion: FusionParams<T>,
    pub lora: LoraMap<T>,
}

impl<T: Real> ParamSet<T> for Adapters<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.pen.collect(&join(prefix, "pen"), out);
        self.fusion.collect(&join(prefix, "fusion"), out);
        self.lora.collect(&join(prefix, "lora"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.pen.collect_mut(&join(prefix, "pen"), out);
        self.fusion.collect_mut(&join(prefix, "fusion"), out);
        self.lora.collect_mut(&join(prefix, "lora"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub adapters: Adapters<T>,
}

impl<T: Real> ParamSet<T> for ModelParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.backbone.collect(&join(prefix, "backbone"), out);
        self.adapters.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.backbone.collect_mut(&join(prefix, "backbone"), out);
        self.adapters.collect_mut(prefix, out);
    }
}

/// Frozen during adapter training.
pub fn is_frozen(name: &str) -> bool {
    name.starts_with("backbone.")
}

/// Backbone tensors on the image side: encoder and projector.
pub fn is_vision_param(name: &str) -> bool {
    name.strip_prefix("backbone.").is_some_and(|n| {
        ["patch_embed", "vision_pos", "vision.", "vision_norm", "projector."].iter().any(|p| n.starts_with(p))
    })
}

fn decoder_prefix(i: usize) -> String {
    format!("decoder.{i}")
}

/// Fixed-frequency 2D sine/cosine table: the first half of the channels
/// encodes the grid row, the second half the column.
fn sincos_2d<T: Real>(grid: (usize, usize), d: usize) -> Tensor<T> {
    let quarter = d / 4;
    let mut t = Tensor::zeros(&[grid.0 * grid.1, d]);
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let row = &mut t.data[(gy * grid.1 + gx) * d..(gy * grid.1 + gx + 1) * d];
            for (half, pos) in [(0, gy), (1, gx)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter.max(1) as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + k] = T::lit(a.sin());
                    row[half * 2 * quarter + quarter + k] = T::lit(a.cos());
                }
            }
        }
    }
    t
}

impl<T: Real> Backbone<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let patch_dim = 3 * cfg.patch * cfg.patch;
        Backbone {
            patch_embed: Linear::init(&mut rng, patch_dim, d, true),
            vision_pos: sincos_2d(cfg.grid(), d),
            vision_blocks: (0..cfg.vision_blocks).map(|_| Block::init(&mut rng, d, cfg.mlp_hidden)).collect(),
            vision_norm: LayerNorm::new(d),
            projector_fc1: Linear::init(&mut rng, d, d, true),
            projector_fc2: Linear::init(&mut rng, d, d, true),
            token_embed: normal_tensor(&mut rng, &[cfg.vocab_size, d], 1.0),
            pos_embed: normal_tensor(&mut rng, &[cfg.max_len, d], 0.5),
            decoder_blocks: (0..cfg.decoder_blocks).map(|_| Block::init(&mut rng, d, cfg.mlp_hidden)).collect(),
            final_norm: LayerNorm::new(d),
            output_head: Linear::init(&mut rng, d, cfg.vocab_size, false),
        }
    }
}

impl<T: Real> Adapters<T> {
    /// Fresh adapters: PEN per `cfg.pen_init`, identity concat fusion, and
    /// LoRA pairs with `B = 0` on every configured decoder matrix.
    pub fn init(cfg: &ModelConfig, backbone: &Backbone<T>, seed: u64) -> Self {
        let pen = pen_init(seed, cfg.prompt_dim, cfg.d_model, cfg.pen_init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut lora = LoraMap::new();
        for (i, block) in backbone.decoder_blocks.iter().enumerate() {
            for slot in &cfg.lora_targets {
                let (din, dout) = block.slot_dims(slot).unwrap_or_else(|| panic!("unknown LoRA target {slot:?}"));
                let name = format!("{}.{slot}", decoder_prefix(i));
                lora.insert(name, LoraAdapter::init(&mut rng, din, dout, cfg.lora_rank, cfg.lora_alpha));
            }
        }
        Adapters { pen, fusion: FusionParams::new(cfg.fusion, cfg.d_model), lora }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, backbone_seed: u64, adapter_seed: u64) -> Self {
        let backbone = Backbone::init(cfg, backbone_seed);
        let adapters = Adapters::init(cfg, &backbone, adapter_seed);
        ModelParams { config: cfg.clone(), backbone, adapters }
    }

    /// Copy every named tensor from `named`, converting precision. Names and
    /// shapes must match exactly.
    pub fn assign_from<U: Real>(&mut self, named: &[(String, &Tensor<U>)]) -> Result<(), ModelError> {
        let mut mine = self.named_mut();
        if mine.len() != named.len() {
            return Err(ModelError::ShapeMismatch(format!("{} tensors vs {}", mine.len(), named.len())));
        }
        for ((n1, t1), (n2, t2)) in mine.iter_mut().zip(named) {
            if n1 != n2 || t1.shape != t2.shape {
                return Err(ModelError::ShapeMismatch(format!("{n1} {:?} vs {n2} {:?}", t1.shape, t2.shape)));
            }
            **t1 = t2.cast();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(&self.config, 0, 0);
        // Parameter sets built from the same config share names and shapes.
        out.adapters.fusion = FusionParams::new(self.adapters.fusion.mode, self.config.d_model);
        out.assign_from(&self.named()).expect("same structure");
        out.adapters.lora.iter_mut().for_each(|(k, a)| a.alpha = self.adapters.lora[k].alpha);
        out
    }

    /// Checksum over all frozen tensors.
    pub fn frozen_checksum(&self) -> u64 {
        let frozen: Vec<_> = self.named().into_iter().filter(|(n, _)| is_frozen(n)).collect();
        crate::tensor::checksum(&frozen)
    }

    /// Set every LoRA `B` to zero.
    pub fn reset_lora_b(&mut self) {
        for a in self.adapters.lora.values_mut() {
            a.b.fill(T::zero());
        }
    }
}

// ------------------------------------------------------------------ vision

/// Split `n` images into non-overlapping `p × p` patches flattened as
/// `(py, px, channel)`; rows are ordered image-major, then grid row-major.
fn patchify<T: Real>(images: &[&Image], p: usize) -> Result<(Vec<T>, (usize, usize)), ModelError> {
    let first = images.first().ok_or(ModelError::EmptyBatch)?;
    let (h, w) = (first.height, first.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(PenError::IndivisiblePatch { patch: p, height: h, width: w }.into());
    }
    let (gh, gw) = (h / p, w / p);
    let pd = 3 * p * p;
    let mut out = Vec::with_capacity(images.len() * gh * gw * pd);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(ModelError::ShapeMismatch("images in a batch must share dimensions".into()));
        }
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        for c in img.pixel(gy * p + py, gx * p + px) {
                            out.push(T::lit(c as f64));
                        }
                    }
                }
            }
        }
    }
    Ok((out, (gh, gw)))
}

pub struct VisionCache<T> {
    n: usize,
    tokens: usize,
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LnCache<T>,
    normed: Vec<T>,
    p1: Vec<T>,
    g: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Batched image encoder + projector. Returns `n·N_v × d` tokens.
    pub fn vision_forward(&self, images: &[&Image]) -> Result<(Vec<T>, (usize, usize), VisionCache<T>), ModelError> {
        let bb = &self.backbone;
        let (patches, grid) = patchify::<T>(images, self.config.patch)?;
        let n = images.len();
        let tokens = grid.0 * grid.1;
        let rows = n * tokens;
        if tokens * self.config.d_model != bb.vision_pos.numel() {
            return Err(ModelError::ShapeMismatch(format!(
                "{}x{} image gives {tokens} tokens, model expects {}",
                images[0].height,
                images[0].width,
                bb.vision_pos.shape[0]
            )));
        }
        let segs: Vec<Segment> = (0..n).map(|i| Segment { start: i * tokens, len: tokens, prefix: tokens }).collect();
        let mut x = bb.patch_embed.forward(&patches, rows);
        for row in x.chunks_mut(bb.vision_pos.numel()) {
            row.iter_mut().zip(&bb.vision_pos.data).for_each(|(a, &b)| *a += b);
        }
        let mut caches = Vec::with_capacity(bb.vision_blocks.len());
        for b in &bb.vision_blocks {
            let (y, c) = b.forward(&x, self.config.heads, &segs, None);
            caches.push(c);
            x = y;
        }
        let (normed, norm) = bb.vision_norm.forward(&x);
        let p1 = bb.projector_fc1.forward(&normed, rows);
        let g = gelu(&p1);
        let fv = bb.projector_fc2.forward(&g, rows);
        Ok((fv, grid, VisionCache { n, tokens, patches, blocks: caches, norm, normed, p1, g }))
    }

    pub fn vision_backward(&self, cache: &VisionCache<T>, dfv: &[T], grad: &mut Backbone<T>) {
        let bb = &self.backbone;
        let rows = cache.n * cache.tokens;
        let segs: Vec<Segment> =
            (0..cache.n).map(|i| Segment { start: i * cache.tokens, len: cache.tokens, prefix: cache.tokens }).collect();
        let dg = bb.projector_fc2.backward(&cache.g, dfv, rows, Some(&mut grad.projector_fc2), true).expect("dx");
        let dp1 = gelu_backward(&cache.p1, &dg);
        let dn = bb.projector_fc1.backward(&cache.normed, &dp1, rows, Some(&mut grad.projector_fc1), true).expect("dx");
        let mut dx = bb.vision_norm.backward(&cache.norm, &dn, Some(&mut grad.vision_norm));
        for (i, b) in bb.vision_blocks.iter().enumerate().rev() {
            dx = b.backward(&cache.blocks[i], &dx, self.config.heads, &segs, None, Some(&mut grad.vision_blocks[i]), None);
        }
        for chunk in dx.chunks(bb.vision_pos.numel()) {
            grad.vision_pos.data.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
        }
        bb.patch_embed.backward(&cache.patches, &dx, rows, Some(&mut grad.patch_embed), false);
    }
}

/// Image tokens `F_v` for one image.
pub fn vision_encode<T: Real>(image: &Image, params: &ModelParams<T>) -> Result<TokenFeatures<T>, ModelError> {
    let (fv, grid, _) = params.vision_forward(&[image])?;
    Ok(TokenFeatures::new(grid, params.config.d_model, fv))
}

/// Base linear map plus the scaled low-rank update for the adapted decoder
/// matrix `name` (e.g. `decoder.0.attn.q`). `x` is `rows × d_in`.
pub fn lora_apply<T: Real>(name: &str, x: &[T], rows: usize, params: &ModelParams<T>) -> Result<Vec<T>, ModelError> {
    let adapter = params.adapters.lora.get(name).ok_or_else(|| ModelError::UnknownAdapter(name.to_string()))?;
    let (block, slot) = name
        .strip_prefix("decoder.")
        .and_then(|rest| rest.split_once('.'))
        .ok_or_else(|| ModelError::UnknownAdapter(name.to_string()))?;
    let idx: usize = block.parse().map_err(|_| ModelError::UnknownAdapter(name.to_string()))?;
    let base = params
        .backbone
        .decoder_blocks
        .get(idx)
        .and_then(|b| b.slot_linear(slot))
        .ok_or_else(|| ModelError::UnknownAdapter(name.to_string()))?;
    if x.len() != rows * base.d_in() {
        return Err(ModelError::ShapeMismatch(format!("input {} values for {rows}x{}", x.len(), base.d_in())));
    }
    let mut y = base.forward(x, rows);
    adapter.forward_into(x, rows, &mut y);
    Ok(y)
}

// ------------------------------------------------------------ PEN + fusion

pub struct InjectCache<T> {
    fv: Vec<T>,
    fp: Vec<T>,
    pen: PenCache<T>,
}

impl<T: Real> ModelParams<T> {
    /// Fuse prompt features into packed image tokens. `grids` holds `n`
    /// pooled prompts of `h × w × prompt_dim`.
    pub fn inject_forward(&self, fv: &[T], grids: &[T], n: usize, grid: (usize, usize)) -> Result<(Vec<T>, InjectCache<T>), ModelError> {
        let d = self.config.d_model;
        let expect = n * grid.0 * grid.1;
        if fv.len() != expect * d || grids.len() != expect * self.adapters.pen.in_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "{n} samples on a {grid:?} grid: tokens {} / prompt {} values",
                fv.len(),
                grids.len()
            )));
        }
        let (fp, pen) = self.adapters.pen.forward_batch(grids, n, grid.0, grid.1);
        let fused = self.adapters.fusion.forward_rows(fv, &fp, d);
        Ok((fused, InjectCache { fv: fv.to_vec(), fp, pen }))
    }

    /// Returns `dF_v`.
    pub fn inject_backward(&self, cache: &InjectCache<T>, dfused: &[T], grad: &mut Adapters<T>) -> Vec<T> {
        let d = self.config.d_model;
        let (dfv, dfp) = self.adapters.fusion.backward_rows(&cache.fv, &cache.fp, dfused, d, Some(&mut grad.fusion));
        self.adapters.pen.backward_batch(&cache.pen, &dfp, &mut grad.pen);
        dfv
    }
}

// ----------------------------------------------------------------- decoder

pub struct DecoderCache<T> {
    segs: Vec<Segment>,
    n_img: usize,
    text_lens: Vec<usize>,
    ids: Vec<u32>,
    blocks: Vec<BlockCache<T>>,
    text_rows: Vec<usize>,
    final_ln: LnCache<T>,
    normed: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Packed decoder pass. `fused` holds `texts.len()` blocks of `n_img`
    /// tokens. Returns per-sample logits of shape `text_len × V`.
    pub fn decoder_forward_batch(&self, fused: &[T], n_img: usize, texts: &[&[u32]]) -> Result<(Vec<Vec<T>>, DecoderCache<T>), ModelError> {
        let cfg = &self.config;
        let bb = &self.backbone;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        if fused.len() != texts.len() * n_img * d {
            return Err(ModelError::ShapeMismatch(format!("fused has {} values for {} samples", fused.len(), texts.len())));
        }
        let mut segs = Vec::with_capacity(texts.len());
        let mut start = 0;
        for t in texts {
            let len = n_img + t.len();
            if len > cfg.max_len {
                return Err(ModelError::SequenceTooLong { len, max: cfg.max_len });
            }
            if let Some(&id) = t.iter().find(|&&id| id as usize >= v) {
                return Err(ModelError::InvalidToken { id, vocab: v });
            }
            segs.push(Segment { start, len, prefix: n_img });
            start += len;
        }
        let rows = start;
        let mut x = vec![T::zero(); rows * d];
        let mut text_rows = Vec::new();
        let mut ids = Vec::new();
        for (s, (seg, t)) in segs.iter().zip(texts).enumerate() {
            for p in 0..seg.len {
                let row = &mut x[(seg.start + p) * d..(seg.start + p + 1) * d];
                let pos = &bb.pos_embed.data[p * d..(p + 1) * d];
                let src = if p < n_img {
                    &fused[(s * n_img + p) * d..(s * n_img + p + 1) * d]
                } else {
                    let id = t[p - n_img] as usize;
                    text_rows.push(seg.start + p);
                    ids.push(id as u32);
                    &bb.token_embed.data[id * d..(id + 1) * d]
                };
                for i in 0..d {
                    row[i] = src[i] + pos[i];
                }
            }
        }
        let mut caches = Vec::with_capacity(bb.decoder_blocks.len());
        for (i, b) in bb.decoder_blocks.iter().enumerate() {
            let prefix = decoder_prefix(i);
            let site = LoraSite { map: &self.adapters.lora, prefix: &prefix };
            let (y, c) = b.forward(&x, cfg.heads, &segs, Some(site));
            caches.push(c);
            x = y;
        }
        let mut gathered = Vec::with_capacity(text_rows.len() * d);
        for &r in &text_rows {
            gathered.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        let (normed, final_ln) = bb.final_norm.forward(&gathered);
        let logits = bb.output_head.forward(&normed, text_rows.len());
        let mut out = Vec::with_capacity(texts.len());
        let mut off = 0;
        for t in texts {
            out.push(logits[off * v..(off + t.len()) * v].to_vec());
            off += t.len();
        }
        let cache = DecoderCache {
            segs,
            n_img,
            text_lens: texts.iter().map(|t| t.len()).collect(),
            ids,
            blocks: caches,
            text_rows,
            final_ln,
            normed,
        };
        Ok((out, cache))
    }

    /// Backpropagate per-sample logit gradients. Returns `d fused` when
    /// `need_dfused`.
    pub fn decoder_backward(
        &self,
        cache: &DecoderCache<T>,
        dlogits: &[Vec<T>],
        mut grad: Option<&mut Backbone<T>>,
        mut lora_grads: Option<&mut LoraMap<T>>,
        need_dfused: bool,
    ) -> Option<Vec<T>> {
        let cfg = &self.config;
        let bb = &self.backbone;
        let d = cfg.d_model;
        let n_text = cache.text_rows.len();
        let dl: Vec<T> = dlogits.iter().flatten().copied().collect();
        let dnormed = bb
            .output_head
            .backward(&cache.normed, &dl, n_text, grad.as_deref_mut().map(|g| &mut g.output_head), true)
            .expect("dx");
        let dgathered = bb.final_norm.backward(&cache.final_ln, &dnormed, grad.as_deref_mut().map(|g| &mut g.final_norm));
        let rows: usize = cache.segs.iter().map(|s| s.len).sum();
        let mut dx = vec![T::zero(); rows * d];
        for (i, &r) in cache.text_rows.iter().enumerate() {
            dx[r * d..(r + 1) * d].copy_from_slice(&dgathered[i * d..(i + 1) * d]);
        }
        for (i, b) in bb.decoder_blocks.iter().enumerate().rev() {
            let prefix = decoder_prefix(i);
            let site = LoraSite { map: &self.adapters.lora, prefix: &prefix };
            dx = b.backward(
                &cache.blocks[i],
                &dx,
                cfg.heads,
                &cache.segs,
                Some(site),
                grad.as_deref_mut().map(|g| &mut g.decoder_blocks[i]),
                lora_grads.as_deref_mut(),
            );
        }
        if let Some(g) = grad {
            let mut t = 0;
            for seg in &cache.segs {
                for p in 0..seg.len {
                    let row = &dx[(seg.start + p) * d..(seg.start + p + 1) * d];
                    for i in 0..d {
                        g.pos_embed.data[p * d + i] += row[i];
                    }
                    if p >= cache.n_img {
                        let id = cache.ids[t] as usize;
                        t += 1;
                        for i in 0..d {
                            g.token_embed.data[id * d + i] += row[i];
                        }
                    }
                }
            }
        }
        need_dfused.then(|| {
            let mut out = Vec::with_capacity(cache.segs.len() * cache.n_img * d);
            for seg in &cache.segs {
                out.extend_from_slice(&dx[seg.start * d..(seg.start + cache.n_img) * d]);
            }
            debug_assert_eq!(cache.text_lens.len(), cache.segs.len());
            out
        })
    }
}

/// Logits `(N_t + L) × V` over the text positions of one sample.
pub fn decoder_forward<T: Real>(fused: &TokenFeatures<T>, sample: &Tokenized, params: &ModelParams<T>) -> Result<Vec<T>, ModelError> {
    if fused.dim != params.config.d_model {
        return Err(ModelError::ShapeMismatch(format!("token dim {} vs d_model {}", fused.dim, params.config.d_model)));
    }
    let text = sample.text();
    let (mut logits, _) = params.decoder_forward_batch(&fused.data, fused.count, &[&text])?;
    Ok(logits.pop().expect("one sample"))
}

// -------------------------------------------------------------------- loss

/// Which text positions contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpan {
    /// Only positions predicting answer tokens.
    #[default]
    Answer,
    /// Every next-token prediction inside question and answer.
    FullText,
}

/// `(text row, target id)` pairs scored by the loss. The row predicting the
/// first answer token is the last question position.
fn loss_targets(n_question: usize, answer: &[u32], question: &[u32], span: LossSpan) -> Vec<(usize, u32)> {
    let mut t = Vec::new();
    if span == LossSpan::FullText {
        for (i, &q) in question.iter().enumerate().skip(1) {
            t.push((i - 1, q));
        }
    }
    for (i, &a) in answer.iter().enumerate() {
        t.push((n_question - 1 + i, a));
    }
    t
}

/// Mean negative log-likelihood and its gradient w.r.t. the logits.
pub fn loss_and_grad<T: Real>(logits: &[T], vocab: usize, sample: &Tokenized, span: LossSpan) -> (T, Vec<T>) {
    let targets = loss_targets(sample.question.len(), &sample.answer, &sample.question, span);
    let inv = T::one() / T::lit(targets.len() as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (row, target) in targets {
        let l = &logits[row * vocab..(row + 1) * vocab];
        let lse = log_sum_exp(l);
        loss += lse - l[target as usize];
        let g = &mut grad[row * vocab..(row + 1) * vocab];
        for (gi, &li) in g.iter_mut().zip(l) {
            *gi += (li - lse).exp() * inv;
        }
        g[target as usize] -= inv;
    }
    (loss * inv, grad)
}

/// `−(1/L)·Σ log softmax(logits at the row predicting y_i)[y_i]`.
pub fn answer_loss<T: Real>(logits: &[T], vocab: usize, sample: &Tokenized) -> T {
    loss_and_grad(logits, vocab, sample, LossSpan::Answer).0
}

// ------------------------------------------------------------------ decode

/// Greedy decoding for a batch sharing `n_img` image tokens per sample.
/// Appends the argmax token (lowest id on ties) until EOS or `max_new`
/// tokens have been produced.
pub fn greedy_decode_batch<T: Real>(
    fused: &[T],
    n_img: usize,
    questions: &[&[u32]],
    params: &ModelParams<T>,
    max_new: usize,
) -> Result<Vec<Vec<u32>>, ModelError> {
    let d = params.config.d_model;
    let v = params.config.vocab_size;
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); questions.len()];
    let mut active: Vec<usize> = (0..questions.len()).collect();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let texts: Vec<Vec<u32>> = active
            .iter()
            .map(|&i| {
                let mut t = questions[i].to_vec();
                t.extend_from_slice(&outputs[i]);
                t
            })
            .collect();
        if texts.iter().any(|t| n_img + t.len() > params.config.max_len) {
            break;
        }
        let mut packed = Vec::with_capacity(active.len() * n_img * d);
        for &i in &active {
            packed.extend_from_slice(&fused[i * n_img * d..(i + 1) * n_img * d]);
        }
        let refs: Vec<&[u32]> = texts.iter().map(|t| t.as_slice()).collect();
        let (logits, _) = params.decoder_forward_batch(&packed, n_img, &refs)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let last = texts[k].len() - 1;
            let tok = argmax(&logits[k][last * v..(last + 1) * v]) as u32;
            outputs[i].push(tok);
            if tok != EOS_ID {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(outputs)
}

pub fn greedy_decode<T: Real>(fused: &TokenFeatures<T>, question: &[u32], params: &ModelParams<T>, max_new: usize) -> Result<Vec<u32>, ModelError> {
    Ok(greedy_decode_batch(&fused.data, fused.count, &[question], params, max_new)?.pop().expect("one"))
}
