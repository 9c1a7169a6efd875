//! Batched loss/gradient, AdamW, the training loop, checkpoints and
//! evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, TensorArchive};
use crate::knowledge::ExternalKnowledge;
use crate::math::Real;
use crate::model::{greedy_decode_batch, loss_and_grad, is_vision_param, Adapters, Backbone, Image, LossSpan, ModelConfig, ModelError, ModelParams, Tokenized};
use crate::pen::{pool_to_grid, PenError};
use crate::raster::{build_prompt, RasterError};
use crate::synth::{Metrics, TaskKind, TrainSample};
use crate::tensor::{ParamSet, Tensor};
use crate::text_embed::TextEncoder;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty training set")]
    EmptySet,
}

impl From<PenError> for TrainError {
    fn from(e: PenError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    None,
    #[default]
    VisualPrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Seeds the per-step minibatch draw.
    pub seed: u64,
    pub loss_span: LossSpan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            loss_span: LossSpan::Answer,
        }
    }
}

impl TrainConfig {
    /// Learning rate 2e-4 with batch 256, the setting used for billion-scale
    /// backbones.
    pub fn full_scale_reference() -> Self {
        TrainConfig { lr: 2e-4, batch_size: 256, ..Self::default() }
    }
}

// ---------------------------------------------------------------- prompts

/// Rasterize `k` (optionally without OCR) and area-pool it to the token grid.
pub fn prompt_grid<T: Real>(
    k: &ExternalKnowledge,
    encoder: &dyn TextEncoder,
    cfg: &ModelConfig,
    tau: f64,
    ocr_enabled: bool,
) -> Result<Vec<T>, TrainError> {
    let stripped;
    let k = if ocr_enabled {
        k
    } else {
        stripped = k.without_ocr();
        &stripped
    };
    let p = build_prompt(k, encoder, cfg.prompt_dim, tau)?;
    let g = pool_to_grid(&p, cfg.patch)?;
    Ok(g.data.iter().map(|&v| T::lit(v)).collect())
}

// --------------------------------------------------------------- gradients

/// Inputs for one packed batch.
pub struct Batch<'a, T> {
    pub images: Vec<&'a Image>,
    /// Precomputed frozen image tokens per sample; skips the vision encoder.
    pub vision: Option<Vec<&'a [T]>>,
    /// Pooled prompt grids per sample; `None` means no injection.
    pub prompts: Option<Vec<&'a [T]>>,
    pub tokens: Vec<&'a Tokenized>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    /// With `backbone`, also train the image encoder and projector.
    pub vision: bool,
    pub adapters: bool,
}

impl Trainable {
    pub const ADAPTERS: Trainable = Trainable { backbone: false, vision: false, adapters: true };
    pub const BACKBONE: Trainable = Trainable { backbone: true, vision: true, adapters: false };
    /// Backbone text side only; image tokens can then be cached.
    pub const DECODER: Trainable = Trainable { backbone: true, vision: false, adapters: false };

    fn vision_grads(&self) -> bool {
        self.backbone && self.vision
    }
}

pub struct Gradients<T> {
    pub backbone: Option<Backbone<T>>,
    /// Whether image-side entries of `backbone` are real gradients.
    pub vision: bool,
    pub adapters: Option<Adapters<T>>,
}

fn drop_vision<R>(out: &mut Vec<(String, R)>, start: usize) {
    let mut tail = out.split_off(start);
    tail.retain(|(n, _)| !is_vision_param(n));
    out.extend(tail);
}

impl<T: Real> ParamSet<T> for Gradients<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        let start = out.len();
        self.backbone.collect(&crate::tensor::join(prefix, "backbone"), out);
        if !self.vision {
            drop_vision(out, start);
        }
        self.adapters.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        let start = out.len();
        self.backbone.collect_mut(&crate::tensor::join(prefix, "backbone"), out);
        if !self.vision {
            drop_vision(out, start);
        }
        self.adapters.collect_mut(prefix, out);
    }
}

/// Image tokens for a batch, fused with prompts when present.
pub fn fused_tokens<T: Real>(params: &ModelParams<T>, batch: &Batch<'_, T>) -> Result<(Vec<T>, usize), TrainError> {
    let n = batch.tokens.len();
    let (fv, grid) = match &batch.vision {
        Some(v) => (v.concat(), params.config.grid()),
        None => {
            let (fv, grid, _) = params.vision_forward(&batch.images)?;
            (fv, grid)
        }
    };
    let fused = match &batch.prompts {
        Some(p) => params.inject_forward(&fv, &p.concat(), n, grid)?.0,
        None => fv,
    };
    Ok((fused, grid.0 * grid.1))
}

/// Mean per-sample loss over the batch and gradients for the requested
/// parameter groups.
pub fn batch_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    batch: &Batch<'_, T>,
    span: LossSpan,
    trainable: Trainable,
) -> Result<(T, Gradients<T>), TrainError> {
    let n = batch.tokens.len();
    if n == 0 {
        return Err(TrainError::EmptySet);
    }
    if batch.vision.is_some() && trainable.vision_grads() {
        return Err(TrainError::Model(ModelError::ShapeMismatch("cached vision tokens with a trainable backbone".into())));
    }
    let (fv, grid, vcache) = match &batch.vision {
        Some(v) => (v.concat(), params.config.grid(), None),
        None => {
            let (fv, grid, c) = params.vision_forward(&batch.images)?;
            (fv, grid, Some(c))
        }
    };
    let n_img = grid.0 * grid.1;
    let (fused, icache) = match &batch.prompts {
        Some(p) => {
            let (f, c) = params.inject_forward(&fv, &p.concat(), n, grid)?;
            (f, Some(c))
        }
        None => (fv, None),
    };
    let texts: Vec<Vec<u32>> = batch.tokens.iter().map(|t| t.text()).collect();
    let refs: Vec<&[u32]> = texts.iter().map(|t| t.as_slice()).collect();
    let (logits, dcache) = params.decoder_forward_batch(&fused, n_img, &refs)?;

    let inv = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut dlogits = Vec::with_capacity(n);
    for (l, t) in logits.iter().zip(&batch.tokens) {
        let (li, mut g) = loss_and_grad(l, params.config.vocab_size, t, span);
        loss += li;
        g.iter_mut().for_each(|v| *v *= inv);
        dlogits.push(g);
    }
    loss *= inv;

    let mut grads = Gradients {
        backbone: trainable.backbone.then(|| params.backbone.zeroed()),
        vision: trainable.vision_grads(),
        adapters: trainable.adapters.then(|| params.adapters.zeroed()),
    };
    let need_dfused = trainable.vision_grads() || (trainable.adapters && icache.is_some());
    let dfused = params.decoder_backward(
        &dcache,
        &dlogits,
        grads.backbone.as_mut(),
        grads.adapters.as_mut().map(|a| &mut a.lora),
        need_dfused,
    );
    if let Some(dfused) = dfused {
        let dfv = match (&icache, grads.adapters.as_mut()) {
            (Some(ic), Some(ag)) => params.inject_backward(ic, &dfused, ag),
            (Some(_), None) => {
                let mut scratch = params.adapters.zeroed();
                params.inject_backward(icache.as_ref().expect("cache"), &dfused, &mut scratch)
            }
            (None, _) => dfused,
        };
        if let (Some(vc), Some(bg), true) = (&vcache, grads.backbone.as_mut(), grads.vision) {
            params.vision_backward(vc, &dfv, bg);
        }
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------- optimizer

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Update every parameter in `params` whose name appears in `grads`.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr, eps, wd) = (T::lit(self.lr), T::lit(self.eps), T::lit(self.lr * self.weight_decay));
        let (c1, c2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let grads: BTreeMap<String, &Tensor<T>> = grads.named().into_iter().collect();
        for (name, p) in params.named_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&p.shape));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(&p.shape));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let mh = m.data[i] * c1;
                let vh = v.data[i] * c2;
                let decay = wd * p.data[i];
                p.data[i] -= lr * mh / (vh.sqrt() + eps) + decay;
            }
        }
    }
}

// ---------------------------------------------------------------- training

/// Per-sample training inputs kept in memory.
pub struct TrainSet<'a, T> {
    pub images: Vec<&'a Image>,
    pub tokens: Vec<&'a Tokenized>,
    pub prompts: Option<Vec<Vec<T>>>,
    pub vision: Option<Vec<Vec<T>>>,
}

impl<'a, T: Real> TrainSet<'a, T> {
    pub fn new(samples: &'a [TrainSample]) -> Self {
        TrainSet {
            images: samples.iter().map(|s| &s.image).collect(),
            tokens: samples.iter().map(|s| &s.tokens).collect(),
            prompts: None,
            vision: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn with_prompts(
        mut self,
        samples: &[TrainSample],
        encoder: &dyn TextEncoder,
        cfg: &ModelConfig,
        tau: f64,
        ocr_enabled: bool,
    ) -> Result<Self, TrainError> {
        let p = samples.iter().map(|s| prompt_grid(&s.knowledge, encoder, cfg, tau, ocr_enabled)).collect::<Result<_, _>>()?;
        self.prompts = Some(p);
        Ok(self)
    }

    /// Cache the frozen vision tokens of every image.
    pub fn with_vision_cache(mut self, params: &ModelParams<T>, chunk: usize) -> Result<Self, TrainError> {
        let mut cache = Vec::with_capacity(self.len());
        let per = params.config.num_image_tokens() * params.config.d_model;
        for imgs in self.images.chunks(chunk.max(1)) {
            let (fv, _, _) = params.vision_forward(imgs)?;
            cache.extend(fv.chunks(per).map(|c| c.to_vec()));
        }
        self.vision = Some(cache);
        Ok(self)
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<'_, T> {
        Batch {
            images: idx.iter().map(|&i| self.images[i]).collect(),
            vision: self.vision.as_ref().map(|v| idx.iter().map(|&i| v[i].as_slice()).collect()),
            prompts: self.prompts.as_ref().map(|p| idx.iter().map(|&i| p[i].as_slice()).collect()),
            tokens: idx.iter().map(|&i| self.tokens[i]).collect(),
        }
    }
}

/// Indices for `step`: a draw without replacement that depends only on the
/// seed and the step number, so resumed runs see the same batches.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Header plus one `step,loss,lr` line per row.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in rows {
        s.push_str(&format_row(r));
    }
    s
}

pub fn format_row(r: &LogRow) -> String {
    format!("{},{:.9},{}\n", r.step, r.loss, r.lr)
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub trainable: Trainable,
    pub opt: AdamW<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, trainable: Trainable) -> Self {
        let opt = AdamW::new(&config);
        Trainer { config, trainable, opt }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Run one optimizer step on the minibatch for the current step number.
    pub fn train_step(&mut self, params: &mut ModelParams<T>, set: &TrainSet<'_, T>) -> Result<LogRow, TrainError> {
        if set.is_empty() {
            return Err(TrainError::EmptySet);
        }
        let step = self.opt.step;
        let idx = batch_indices(self.config.seed, step, set.len(), self.config.batch_size);
        let (loss, grads) = batch_loss_and_grad(params, &set.batch(&idx), self.config.loss_span, self.trainable)?;
        self.opt.update(params, &grads);
        Ok(LogRow { step: step + 1, loss: loss.as_f64(), lr: self.opt.lr })
    }

    /// Train until `config.steps`, calling `on_row` after every step.
    pub fn run(
        &mut self,
        params: &mut ModelParams<T>,
        set: &TrainSet<'_, T>,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>, TrainError> {
        let mut rows = Vec::new();
        while self.opt.step < self.config.steps {
            let row = self.train_step(params, set)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

// -------------------------------------------------------------- checkpoint

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub backbone_trainable: bool,
    pub vision_trainable: bool,
    pub adapters_trainable: bool,
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Every model tensor under its parameter name, plus `opt.m.*` / `opt.v.*`
/// moments. Step count and configs go to a `.json` sidecar.
pub fn checkpoint_archive<T: Real>(params: &ModelParams<T>, trainer: Option<&Trainer<T>>) -> TensorArchive {
    let mut a = TensorArchive::new();
    for (name, t) in params.named() {
        a.push_tensor(name, t);
    }
    if let Some(tr) = trainer {
        for (name, t) in &tr.opt.m {
            a.push_tensor(format!("opt.m.{name}"), t);
        }
        for (name, t) in &tr.opt.v {
            a.push_tensor(format!("opt.v.{name}"), t);
        }
    }
    a
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &ModelParams<T>, trainer: &Trainer<T>) -> Result<(), TrainError> {
    checkpoint_archive(params, Some(trainer)).write_file(path)?;
    let meta = CheckpointMeta {
        model: params.config.clone(),
        train: trainer.config.clone(),
        step: trainer.step(),
        backbone_trainable: trainer.trainable.backbone,
        vision_trainable: trainer.trainable.vision,
        adapters_trainable: trainer.trainable.adapters,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    crate::io::write_atomic(&meta_path(path), json.as_bytes())?;
    Ok(())
}

/// Copy tensors named in `archive` into `params`; names absent from the
/// archive are left alone when `partial`.
pub fn load_params_from<T: Real>(params: &mut ModelParams<T>, archive: &TensorArchive, partial: bool) -> Result<(), TrainError> {
    for (name, t) in params.named_mut() {
        match archive.get(&name) {
            Some(e) if e.shape() == t.shape.as_slice() => *t = e.to_tensor(),
            Some(e) => {
                return Err(TrainError::Checkpoint(format!("{name}: archive shape {:?}, model {:?}", e.shape(), t.shape)));
            }
            None if partial => {}
            None => return Err(TrainError::Checkpoint(format!("missing tensor {name}"))),
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelParams<T>, Trainer<T>), TrainError> {
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(meta_path(path))?)
        .map_err(|e| TrainError::Checkpoint(format!("sidecar: {e}")))?;
    let archive = TensorArchive::read_file(path)?;
    let mut params = ModelParams::init(&meta.model, 0, 0);
    load_params_from(&mut params, &archive, false)?;
    let trainable = Trainable {
        backbone: meta.backbone_trainable,
        vision: meta.vision_trainable,
        adapters: meta.adapters_trainable,
    };
    let mut trainer = Trainer::new(meta.train, trainable);
    trainer.opt.step = meta.step;
    for (name, e) in &archive.entries {
        if let Some(n) = name.strip_prefix("opt.m.") {
            trainer.opt.m.insert(n.to_string(), e.to_tensor());
        } else if let Some(n) = name.strip_prefix("opt.v.") {
            trainer.opt.v.insert(n.to_string(), e.to_tensor());
        }
    }
    Ok((params, trainer))
}

// -------------------------------------------------------------- evaluation

pub struct EvalOptions<'a> {
    pub injection: Injection,
    pub ocr_enabled: bool,
    pub encoder: &'a dyn TextEncoder,
    pub tau: f64,
    pub batch: usize,
    pub max_new: usize,
}

/// Greedy-decode every sample and score exact match per task.
pub fn evaluate<T: Real>(params: &ModelParams<T>, samples: &[TrainSample], opts: &EvalOptions<'_>) -> Result<Metrics, TrainError> {
    let mut metrics = Metrics::default();
    for chunk in samples.chunks(opts.batch.max(1)) {
        let prompts = match opts.injection {
            Injection::VisualPrompt => Some(
                chunk
                    .iter()
                    .map(|s| prompt_grid::<T>(&s.knowledge, opts.encoder, &params.config, opts.tau, opts.ocr_enabled))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            Injection::None => None,
        };
        let batch = Batch {
            images: chunk.iter().map(|s| &s.image).collect(),
            vision: None,
            prompts: prompts.as_ref().map(|p| p.iter().map(|v| v.as_slice()).collect()),
            tokens: chunk.iter().map(|s| &s.tokens).collect(),
        };
        let (fused, n_img) = fused_tokens(params, &batch)?;
        let questions: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.question.as_slice()).collect();
        let preds = greedy_decode_batch(&fused, n_img, &questions, params, opts.max_new)?;
        for (s, p) in chunk.iter().zip(preds) {
            metrics.record(s.task, &p, &s.tokens.answer);
        }
    }
    Ok(metrics)
}

/// Evaluate with precomputed vision tokens and prompts.
pub fn evaluate_cached<T: Real>(
    params: &ModelParams<T>,
    set: &TrainSet<'_, T>,
    tasks: &[TaskKind],
    batch: usize,
    max_new: usize,
) -> Result<Metrics, TrainError> {
    let mut metrics = Metrics::default();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = set.batch(chunk);
        let (fused, n_img) = fused_tokens(params, &b)?;
        let questions: Vec<&[u32]> = b.tokens.iter().map(|t| t.question.as_slice()).collect();
        let preds = greedy_decode_batch(&fused, n_img, &questions, params, max_new)?;
        for ((&i, t), p) in chunk.iter().zip(&b.tokens).zip(preds) {
            metrics.record(tasks[i], &p, &t.answer);
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_split, SynthConfig, Vocab};
    use crate::text_embed::HashEncoder;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            vision_blocks: 1,
            decoder_blocks: 1,
            mlp_hidden: 32,
            vocab_size: vocab,
            prompt_dim: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batch_indices_are_deterministic_and_distinct() {
        let a = batch_indices(7, 3, 100, 16);
        assert_eq!(a, batch_indices(7, 3, 100, 16));
        assert_ne!(a, batch_indices(7, 4, 100, 16));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 16);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let vocab = Vocab::standard();
        let samples = make_split(0, 8, &SynthConfig::default(), &vocab).unwrap();
        let cfg = tiny(vocab.len());
        let mut params: ModelParams<f32> = ModelParams::init(&cfg, 1, 2);
        let enc = HashEncoder::new(cfg.prompt_dim, "t");
        let set = TrainSet::new(&samples).with_prompts(&samples, &enc, &cfg, 0.5, true).unwrap();
        let tc = TrainConfig { steps: 30, batch_size: 8, lr: 3e-3, ..Default::default() };
        let mut tr = Trainer::new(tc, Trainable::ADAPTERS);
        let rows = tr.run(&mut params, &set, |_| {}).unwrap();
        assert!(rows.last().unwrap().loss < rows[0].loss);
    }

    #[test]
    fn evaluation_is_pure() {
        let vocab = Vocab::standard();
        let samples = make_split(0, 6, &SynthConfig::default(), &vocab).unwrap();
        let cfg = tiny(vocab.len());
        let params: ModelParams<f32> = ModelParams::init(&cfg, 1, 2);
        let enc = HashEncoder::new(cfg.prompt_dim, "t");
        let opts = EvalOptions { injection: Injection::VisualPrompt, ocr_enabled: true, encoder: &enc, tau: 0.5, batch: 4, max_new: 3 };
        let before = params.clone();
        let m1 = evaluate(&params, &samples, &opts).unwrap();
        let m2 = evaluate(&params, &samples, &opts).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(params, before);
        assert_eq!(m1.count(), 6);
    }

    #[test]
    fn csv_header() {
        let s = log_csv(&[LogRow { step: 1, loss: 0.5, lr: 1e-3 }]);
        assert_eq!(s, "step,loss,lr\n1,0.500000000,0.001\n");
    }
}
