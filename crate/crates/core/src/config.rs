//! Run configuration and the end-to-end experiment driver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Adapters, ModelConfig, ModelParams};
use crate::raster::DEFAULT_TAU;
use crate::synth::{make_split, LabelMode, Metrics, SynthConfig, SynthError, TaskKind, TrainSample, Vocab};
use crate::text_embed::{load_table, EmbedError, Fallback, HashEncoder, TableEncoder, TextEncoder};
use crate::train::{evaluate, EvalOptions, Injection, LogRow, TrainConfig, TrainError, TrainSet, Trainable, Trainer};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config JSON: {0}")]
    Json(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub salt: String,
    /// Embed-table JSON for `kind = table`.
    pub table: Option<String>,
    /// Hash strings missing from the table instead of failing.
    pub hash_fallback: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { kind: EmbedderKind::Hash, salt: "vpk".into(), table: None, hash_fallback: false }
    }
}

impl EmbedderConfig {
    pub fn build(&self, dim: usize) -> Result<Box<dyn TextEncoder>, ConfigError> {
        match self.kind {
            EmbedderKind::Hash => Ok(Box::new(HashEncoder::new(dim, self.salt.clone()))),
            EmbedderKind::Table => {
                let path = self.table.as_ref().ok_or_else(|| ConfigError::Invalid("table embedder needs a table path".into()))?;
                let table = load_table(&std::fs::read(path)?)?;
                if table.dim() != dim {
                    return Err(ConfigError::Invalid(format!("table dim {} but prompt dim {dim}", table.dim())));
                }
                let fallback = if self.hash_fallback { Fallback::Hash { salt: self.salt.clone() } } else { Fallback::None };
                Ok(Box::new(TableEncoder { table, fallback }))
            }
        }
    }
}

/// Supervised warm-up that stands in for a pretrained backbone: the text
/// side (projector onward) is trained on visible-label scenes with no prompt
/// and no LoRA, over a fixed random image encoder. Training the encoder too
/// lets it smear each label over every token, and the decoder then never
/// learns to look things up by cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub n_samples: usize,
    pub data_seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            train: TrainConfig { steps: 4000, seed: 17, ..TrainConfig::default() },
            data: SynthConfig { mode: LabelMode::VisibleLabel, tasks: vec![TaskKind::LabelAt], ..SynthConfig::default() },
            n_samples: 4000,
            data_seed: 50_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub backbone: u64,
    pub adapters: u64,
    pub train_data: u64,
    pub eval_data: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { backbone: 1, adapters: 2, train_data: 0, eval_data: 10_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub warmup: WarmupConfig,
    pub data: SynthConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub tau: f64,
    pub embedder: EmbedderConfig,
    pub injection: Injection,
    pub ocr_enabled: bool,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig { vocab_size: Vocab::standard().len(), ..ModelConfig::default() },
            train: TrainConfig::default(),
            warmup: WarmupConfig::default(),
            data: SynthConfig::default(),
            n_train: 4000,
            n_eval: 500,
            tau: DEFAULT_TAU,
            embedder: EmbedderConfig::default(),
            injection: Injection::VisualPrompt,
            ocr_enabled: true,
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ConfigError> {
        let c: RunConfig = serde_json::from_slice(bytes).map_err(|e| ConfigError::Json(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let bad = |s: String| Err(ConfigError::Invalid(s));
        if m.patch == 0 || !m.image_size.is_multiple_of(m.patch) {
            return bad(format!("patch {} does not divide image size {}", m.patch, m.image_size));
        }
        if m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return bad(format!("{} heads do not divide d_model {}", m.heads, m.d_model));
        }
        if m.prompt_dim == 0 || m.lora_rank == 0 {
            return bad("prompt_dim and lora_rank must be positive".into());
        }
        if !(self.tau.is_finite()) {
            return bad("tau must be finite".into());
        }
        if self.train.batch_size == 0 || self.warmup.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.seeds.train_data < self.seeds.eval_data + self.n_eval as u64
            && self.seeds.eval_data < self.seeds.train_data + self.n_train as u64
        {
            return bad("train and eval seed ranges overlap".into());
        }
        self.data.validate()?;
        self.warmup.data.validate()?;
        Ok(())
    }
}

/// Warm-up the backbone from `seeds.backbone`. Adapters are freshly
/// initialized afterwards and untouched by the warm-up.
pub fn pretrain_backbone(cfg: &RunConfig, on_row: impl FnMut(&LogRow)) -> Result<ModelParams<f32>, ConfigError> {
    let vocab = Vocab::standard();
    let mut params = ModelParams::<f32>::init(&cfg.model, cfg.seeds.backbone, cfg.seeds.adapters);
    if cfg.warmup.train.steps == 0 {
        return Ok(params);
    }
    let samples = make_split(cfg.warmup.data_seed, cfg.warmup.n_samples, &cfg.warmup.data, &vocab)?;
    let set = TrainSet::new(&samples).with_vision_cache(&params, 64)?;
    let mut trainer = Trainer::new(cfg.warmup.train.clone(), Trainable::DECODER);
    trainer.run(&mut params, &set, on_row)?;
    Ok(params)
}

pub struct ExperimentData {
    pub train: Vec<TrainSample>,
    pub eval: Vec<TrainSample>,
}

pub fn experiment_data(cfg: &RunConfig) -> Result<ExperimentData, ConfigError> {
    let vocab = Vocab::standard();
    crate::synth::audit_splits(&[
        cfg.seeds.train_data..cfg.seeds.train_data + cfg.n_train as u64,
        cfg.seeds.eval_data..cfg.seeds.eval_data + cfg.n_eval as u64,
    ])?;
    Ok(ExperimentData {
        train: make_split(cfg.seeds.train_data, cfg.n_train, &cfg.data, &vocab)?,
        eval: make_split(cfg.seeds.eval_data, cfg.n_eval, &cfg.data, &vocab)?,
    })
}

pub struct ExperimentResult {
    pub params: ModelParams<f32>,
    pub log: Vec<LogRow>,
    pub metrics: Metrics,
}

/// Fresh adapters on a copy of `backbone`, trained and evaluated per `cfg`.
pub fn run_adapter_experiment(
    cfg: &RunConfig,
    backbone: &ModelParams<f32>,
    data: &ExperimentData,
) -> Result<ExperimentResult, ConfigError> {
    cfg.validate()?;
    let encoder = cfg.embedder.build(cfg.model.prompt_dim)?;
    let mut params = backbone.clone();
    params.config = cfg.model.clone();
    params.adapters = Adapters::init(&cfg.model, &params.backbone, cfg.seeds.adapters);
    let mut set = TrainSet::new(&data.train).with_vision_cache(&params, 64)?;
    if cfg.injection == Injection::VisualPrompt {
        set = set.with_prompts(&data.train, encoder.as_ref(), &cfg.model, cfg.tau, cfg.ocr_enabled)?;
    }
    let mut trainer = Trainer::new(cfg.train.clone(), Trainable::ADAPTERS);
    let log = trainer.run(&mut params, &set, |_| {})?;
    let opts = EvalOptions {
        injection: cfg.injection,
        ocr_enabled: cfg.ocr_enabled,
        encoder: encoder.as_ref(),
        tau: cfg.tau,
        batch: 64,
        max_new: 4,
    };
    let metrics = evaluate(&params, &data.eval, &opts)?;
    Ok(ExperimentResult { params, log, metrics })
}
