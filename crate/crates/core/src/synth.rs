//! Synthetic grounded-QA scenes with exact knowledge.
//!
//! A 32×32 image holds a 4×4 grid of 8×8 cells on a gray background. Cells
//! may contain a labelled shape or a sign. Segmentation knowledge is the
//! exact pixel set of every shape; OCR knowledge is the sign box and word.
//! In `hidden_label` mode every shape is drawn in one ink color with a shape
//! drawn independently of its label, so labels are only available through
//! the knowledge.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, TensorArchive, TensorEntry};
use crate::knowledge::{parse_knowledge, serialize_knowledge, BBox, BitMask, ExternalKnowledge, KnowledgeError, OcrRegion, SegmentRegion};
use crate::model::{Image, Tokenized, BOS_ID, EOS_ID};

pub const GRID: usize = 4;
pub const CELL: usize = 8;
pub const IMAGE_SIZE: usize = GRID * CELL;

pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
pub const HIDDEN_INK: [f32; 3] = [0.9, 0.9, 0.9];
const SIGN_LIGHT: [f32; 3] = [1.0, 1.0, 1.0];
const SIGN_DARK: [f32; 3] = [0.0, 0.0, 0.0];

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const COLOR_RGB: [[f32; 3]; 4] = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.1, 0.2, 0.9], [0.95, 0.9, 0.1]];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const LABELS: [&str; 6] = ["cat", "dog", "bird", "fish", "tree", "car"];
pub const LEXICON: [&str; 16] = [
    "stop", "exit", "open", "closed", "sale", "cafe", "bank", "hotel", "taxi", "bus", "park", "zoo", "shop", "bar", "gym", "pub",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("split seed ranges {0:?} and {1:?} overlap")]
    SplitOverlap(Range<u64>, Range<u64>),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ------------------------------------------------------------------ vocab

/// Fixed word-level vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, SynthError> {
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(SynthError::InvalidConfig(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Specials, template words, digits 0-5 (also used as coordinates),
    /// colors, shapes, labels and the sign lexicon.
    pub fn standard() -> Self {
        let mut t: Vec<String> = ["<pad>", "<bos>", "<eos>", "<sep>", "label", "at", "count", "sign", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        t.extend((0..=5).map(|d| d.to_string()));
        for group in [&COLORS[..], &SHAPES[..], &LABELS[..], &LEXICON[..]] {
            t.extend(group.iter().map(|s| s.to_string()));
        }
        let v = Self::from_tokens(t).expect("standard vocab is unique");
        debug_assert_eq!(v.id("<bos>"), Some(BOS_ID));
        debug_assert_eq!(v.id("<eos>"), Some(EOS_ID));
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<u32>, SynthError> {
        words.iter().map(|w| self.id(w).ok_or_else(|| SynthError::UnknownToken(w.to_string()))).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>").to_string()).collect()
    }

    /// `{"token": id, ...}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ids).expect("map serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, SynthError> {
        let ids: BTreeMap<String, u32> = serde_json::from_slice(bytes).map_err(|e| SynthError::Dataset(e.to_string()))?;
        let mut tokens = vec![String::new(); ids.len()];
        for (t, &i) in &ids {
            let slot = tokens.get_mut(i as usize).ok_or_else(|| SynthError::Dataset(format!("vocab id {i} out of range")))?;
            if !slot.is_empty() {
                return Err(SynthError::Dataset(format!("vocab id {i} assigned twice")));
            }
            *slot = t.clone();
        }
        Ok(Vocab { tokens, ids })
    }
}

// ------------------------------------------------------------------ scenes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    VisibleLabel,
    HiddenLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LabelAt,
    CountColor,
    SignText,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LabelAt => "label_at",
            TaskKind::CountColor => "count_color",
            TaskKind::SignText => "sign_text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TaskKind::LabelAt, TaskKind::CountColor, TaskKind::SignText].into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub mode: LabelMode,
    /// Tasks drawn uniformly per sample.
    pub tasks: Vec<TaskKind>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Chance of a sign when the task does not require one.
    pub sign_prob: f64,
    /// Class strings indexed by label draw. Permuting this list changes the
    /// knowledge but not the image in hidden mode.
    pub labels: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: LabelMode::HiddenLabel,
            tasks: vec![TaskKind::LabelAt],
            min_shapes: 1,
            max_shapes: 5,
            sign_prob: 0.5,
            labels: LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.tasks.is_empty() {
            return bad("task list is empty");
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes >= GRID * GRID {
            return bad("shape count range must satisfy 1 <= min <= max <= 15");
        }
        if self.max_shapes > 5 && self.tasks.contains(&TaskKind::CountColor) {
            return bad("count_color answers are single digits 0-5, so at most 5 shapes");
        }
        if !(0.0..=1.0).contains(&self.sign_prob) {
            return bad("sign_prob must lie in [0, 1]");
        }
        if self.mode == LabelMode::HiddenLabel && self.tasks.contains(&TaskKind::CountColor) {
            return bad("count_color needs visible colors");
        }
        if self.labels.len() != LABELS.len() {
            return bad("exactly 6 labels are required");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeItem {
    pub cell: (usize, usize),
    /// Index into [`SHAPES`].
    pub shape: usize,
    /// Index into [`COLORS`].
    pub color: usize,
    /// Index into the configured label list.
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignItem {
    pub cell: (usize, usize),
    /// Index into [`LEXICON`].
    pub word: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shapes: Vec<ShapeItem>,
    pub sign: Option<SignItem>,
    pub mode: LabelMode,
    pub labels: Vec<String>,
}

impl Scene {
    pub fn empty(mode: LabelMode) -> Self {
        Scene { shapes: Vec::new(), sign: None, mode, labels: LABELS.iter().map(|s| s.to_string()).collect() }
    }
}

/// Visible-mode appearance of a label: distinct (shape, color) per label.
pub fn visible_style(label: usize) -> (usize, usize) {
    (label % SHAPES.len(), label % COLORS.len())
}

/// Local pixels `(row, col)` of a shape inside an 8×8 cell.
pub fn shape_pixels(shape: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    for y in 0..CELL {
        for x in 0..CELL {
            let inside = match shape {
                0 => (1..7).contains(&y) && (1..7).contains(&x),
                1 => {
                    let (dy, dx) = (y as f64 - 3.5, x as f64 - 3.5);
                    dy * dy + dx * dx <= 6.5
                }
                _ => {
                    // Rows 1..7 widen by one pixel on each side every two rows.
                    (1..7).contains(&y) && {
                        let half = (y + 1) / 2;
                        x + half >= 4 && x < 4 + half
                    }
                }
            };
            if inside {
                px.push((y, x));
            }
        }
    }
    px
}

/// Inset box of the sign texture inside its cell.
pub fn sign_bbox(cell: (usize, usize)) -> BBox {
    let (r, c) = cell;
    BBox { x0: c * CELL + 1, y0: r * CELL + 1, x1: c * CELL + 7, y1: r * CELL + 7 }
}

/// Rasterize shapes and sign; return the image and its exact knowledge.
pub fn render_scene(scene: &Scene) -> (Image, ExternalKnowledge) {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, BACKGROUND);
    let mut k = ExternalKnowledge::empty(IMAGE_SIZE, IMAGE_SIZE);
    for s in &scene.shapes {
        let rgb = match scene.mode {
            LabelMode::VisibleLabel => COLOR_RGB[s.color],
            LabelMode::HiddenLabel => HIDDEN_INK,
        };
        let mut mask = BitMask::empty(IMAGE_SIZE, IMAGE_SIZE);
        for (y, x) in shape_pixels(s.shape) {
            let (row, col) = (s.cell.0 * CELL + y, s.cell.1 * CELL + x);
            img.set_pixel(row, col, rgb);
            mask.set(row, col, true);
        }
        k.segments.push(SegmentRegion { mask, class_label: scene.labels[s.label].clone(), confidence: 1.0 });
    }
    if let Some(sign) = scene.sign {
        let b = sign_bbox(sign.cell);
        for row in b.y0..b.y1 {
            for col in b.x0..b.x1 {
                let light = (row / 2 + col / 2) % 2 == 0;
                img.set_pixel(row, col, if light { SIGN_LIGHT } else { SIGN_DARK });
            }
        }
        k.ocr.push(OcrRegion { bbox: b, text: LEXICON[sign.word].to_string(), confidence: 1.0 });
    }
    (img, k)
}

fn draw_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, task: TaskKind) -> Scene {
    let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|i| (i / GRID, i % GRID)).collect();
    cells.shuffle(rng);
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes = Vec::with_capacity(n);
    for &cell in &cells[..n] {
        let label = rng.random_range(0..LABELS.len());
        let (shape, color) = match cfg.mode {
            LabelMode::VisibleLabel => visible_style(label),
            LabelMode::HiddenLabel => (rng.random_range(0..SHAPES.len()), 0),
        };
        shapes.push(ShapeItem { cell, shape, color, label });
    }
    let want_sign = task == TaskKind::SignText || rng.random_bool(cfg.sign_prob);
    let sign = want_sign.then(|| SignItem { cell: cells[n], word: rng.random_range(0..LEXICON.len()) });
    Scene { shapes, sign, mode: cfg.mode, labels: cfg.labels.clone() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub knowledge: ExternalKnowledge,
    pub tokens: Tokenized,
    pub task: TaskKind,
}

fn digit(n: usize) -> String {
    n.to_string()
}

/// Scene and QA pair drawn deterministically from `seed`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> (Scene, TaskKind, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = cfg.tasks[rng.random_range(0..cfg.tasks.len())];
    let scene = draw_scene(&mut rng, cfg, task);
    (scene, task, rng)
}

pub fn generate_sample(seed: u64, cfg: &SynthConfig, vocab: &Vocab) -> Result<TrainSample, SynthError> {
    cfg.validate()?;
    let (scene, task, mut rng) = generate_scene(seed, cfg);
    let (question, answer): (Vec<String>, String) = match task {
        TaskKind::LabelAt => {
            let s = scene.shapes[rng.random_range(0..scene.shapes.len())];
            let q = vec!["label".into(), "at".into(), digit(s.cell.0), digit(s.cell.1), "?".into()];
            (q, scene.labels[s.label].clone())
        }
        TaskKind::CountColor => {
            let c = rng.random_range(0..COLORS.len());
            let n = scene.shapes.iter().filter(|s| s.color == c).count();
            (vec!["count".into(), COLORS[c].into(), "?".into()], digit(n))
        }
        TaskKind::SignText => {
            let sign = scene.sign.expect("sign_text scenes carry a sign");
            (vec!["sign".into(), "?".into()], LEXICON[sign.word].to_string())
        }
    };
    let mut q = vec![BOS_ID];
    q.extend(vocab.encode(&question.iter().map(|s| s.as_str()).collect::<Vec<_>>())?);
    let answer = vec![vocab.id(&answer).ok_or(SynthError::UnknownToken(answer))?, EOS_ID];
    let (image, knowledge) = render_scene(&scene);
    Ok(TrainSample { image, knowledge, tokens: Tokenized { question: q, answer }, task })
}

/// Samples for seeds `seed..seed + n`.
pub fn make_split(seed: u64, n: usize, cfg: &SynthConfig, vocab: &Vocab) -> Result<Vec<TrainSample>, SynthError> {
    (0..n as u64).map(|i| generate_sample(seed + i, cfg, vocab)).collect()
}

/// Reject any pair of overlapping seed ranges.
pub fn audit_splits(ranges: &[Range<u64>]) -> Result<(), SynthError> {
    for (i, a) in ranges.iter().enumerate() {
        for b in &ranges[i + 1..] {
            if a.start < b.end && b.start < a.end {
                return Err(SynthError::SplitOverlap(a.clone(), b.clone()));
            }
        }
    }
    Ok(())
}

// ----------------------------------------------------------------- dataset

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QaFile {
    question: Vec<u32>,
    answer: Vec<u32>,
    task: String,
}

pub fn image_entry(img: &Image) -> TensorEntry {
    TensorEntry::from_f32(&[img.height, img.width, 3], &img.data)
}

pub fn image_from_entry(e: &TensorEntry) -> Result<Image, SynthError> {
    match *e.shape() {
        [h, w, 3] => Ok(Image { height: h, width: w, data: e.to_f32() }),
        ref s => Err(SynthError::Dataset(format!("image tensor has shape {s:?}"))),
    }
}

/// Write `NNNN.image.vpkt`, `NNNN.knowledge.json`, `NNNN.qa.json` per sample
/// and `vocab.json`.
pub fn export_dataset(dir: &Path, samples: &[TrainSample], vocab: &Vocab) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let mut a = TensorArchive::new();
        a.push("image", image_entry(&s.image));
        a.write_file(&dir.join(format!("{i:04}.image.vpkt")))?;
        crate::io::write_atomic(&dir.join(format!("{i:04}.knowledge.json")), serialize_knowledge(&s.knowledge).as_bytes())?;
        let qa = QaFile { question: s.tokens.question.clone(), answer: s.tokens.answer.clone(), task: s.task.name().into() };
        crate::io::write_atomic(&dir.join(format!("{i:04}.qa.json")), serde_json::to_string(&qa).expect("qa").as_bytes())?;
    }
    crate::io::write_atomic(&dir.join("vocab.json"), vocab.to_json().as_bytes())?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<(Vec<TrainSample>, Vocab), SynthError> {
    let vocab = Vocab::from_json(&std::fs::read(dir.join("vocab.json"))?)?;
    let mut samples = Vec::new();
    for i in 0.. {
        let img_path = dir.join(format!("{i:04}.image.vpkt"));
        if !img_path.exists() {
            break;
        }
        let archive = TensorArchive::read_file(&img_path)?;
        let image = image_from_entry(archive.require("image")?)?;
        let knowledge = parse_knowledge(&std::fs::read(dir.join(format!("{i:04}.knowledge.json")))?)?;
        let qa: QaFile = serde_json::from_slice(&std::fs::read(dir.join(format!("{i:04}.qa.json")))?)
            .map_err(|e| SynthError::Dataset(format!("{i:04}.qa.json: {e}")))?;
        let task = TaskKind::parse(&qa.task).ok_or_else(|| SynthError::Dataset(format!("unknown task {:?}", qa.task)))?;
        if let Some(&id) = qa.question.iter().chain(&qa.answer).find(|&&id| id as usize >= vocab.len()) {
            return Err(SynthError::Dataset(format!("{i:04}.qa.json: token id {id} outside vocab")));
        }
        samples.push(TrainSample { image, knowledge, tokens: Tokenized { question: qa.question, answer: qa.answer }, task });
    }
    if samples.is_empty() {
        return Err(SynthError::Dataset(format!("no samples in {}", dir.display())));
    }
    Ok((samples, vocab))
}

// ----------------------------------------------------------------- metrics

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub samples: usize,
    pub exact: usize,
    pub tokens: usize,
    pub tokens_correct: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_task: BTreeMap<TaskKind, TaskCounts>,
}

impl Metrics {
    /// Score one prediction against the reference answer.
    pub fn record(&mut self, task: TaskKind, predicted: &[u32], reference: &[u32]) {
        let c = self.per_task.entry(task).or_default();
        c.samples += 1;
        c.exact += usize::from(predicted == reference);
        c.tokens += reference.len();
        c.tokens_correct += reference.iter().zip(predicted).filter(|(a, b)| a == b).count();
    }

    fn total(&self) -> TaskCounts {
        self.per_task.values().fold(TaskCounts::default(), |a, c| TaskCounts {
            samples: a.samples + c.samples,
            exact: a.exact + c.exact,
            tokens: a.tokens + c.tokens,
            tokens_correct: a.tokens_correct + c.tokens_correct,
        })
    }

    pub fn count(&self) -> usize {
        self.total().samples
    }

    pub fn exact_match(&self) -> f64 {
        let t = self.total();
        ratio(t.exact, t.samples)
    }

    pub fn token_accuracy(&self) -> f64 {
        let t = self.total();
        ratio(t.tokens_correct, t.tokens)
    }

    pub fn task_exact_match(&self, task: TaskKind) -> Option<f64> {
        self.per_task.get(&task).map(|c| ratio(c.exact, c.samples))
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Cells holding a shape or sign in `scene`.
pub fn occupied_cells(scene: &Scene) -> HashSet<(usize, usize)> {
    scene.shapes.iter().map(|s| s.cell).chain(scene.sign.map(|s| s.cell)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::validate_knowledge;

    #[test]
    fn vocab_layout() {
        let v = Vocab::standard();
        assert_eq!(v.id("<pad>"), Some(0));
        assert_eq!(v.id("<eos>"), Some(EOS_ID));
        assert_eq!(v.len(), 9 + 6 + 4 + 3 + 6 + 16);
        assert_eq!(Vocab::from_json(v.to_json().as_bytes()).unwrap(), v);
    }

    #[test]
    fn same_seed_same_sample() {
        let v = Vocab::standard();
        let cfg = SynthConfig { tasks: vec![TaskKind::LabelAt, TaskKind::SignText], ..Default::default() };
        assert_eq!(generate_sample(9, &cfg, &v).unwrap(), generate_sample(9, &cfg, &v).unwrap());
    }

    #[test]
    fn empty_scene_is_background() {
        let (img, k) = render_scene(&Scene::empty(LabelMode::VisibleLabel));
        assert!(img.data.chunks(3).all(|p| p == BACKGROUND));
        assert!(k.segments.is_empty() && k.ocr.is_empty());
    }

    #[test]
    fn square_mask_matches_pixels() {
        let mut scene = Scene::empty(LabelMode::VisibleLabel);
        scene.shapes.push(ShapeItem { cell: (0, 0), shape: 0, color: 2, label: 1 });
        let (img, k) = render_scene(&scene);
        assert_eq!(k.segments[0].mask.count(), 36);
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                assert_eq!(img.pixel(row, col) != BACKGROUND, k.segments[0].mask.get(row, col));
            }
        }
    }

    #[test]
    fn hidden_mode_labels_do_not_reach_pixels() {
        let v = Vocab::standard();
        let cfg = SynthConfig::default();
        let mut permuted = cfg.clone();
        permuted.labels.rotate_left(2);
        for seed in 0..20 {
            let a = generate_sample(seed, &cfg, &v).unwrap();
            let b = generate_sample(seed, &permuted, &v).unwrap();
            assert_eq!(a.image, b.image);
            assert_ne!(a.knowledge, b.knowledge);
        }
    }

    #[test]
    fn generated_knowledge_validates() {
        let v = Vocab::standard();
        for mode in [LabelMode::VisibleLabel, LabelMode::HiddenLabel] {
            let cfg = SynthConfig {
                mode,
                tasks: match mode {
                    LabelMode::VisibleLabel => vec![TaskKind::LabelAt, TaskKind::CountColor, TaskKind::SignText],
                    LabelMode::HiddenLabel => vec![TaskKind::LabelAt, TaskKind::SignText],
                },
                ..Default::default()
            };
            for seed in 0..500 {
                let s = generate_sample(seed, &cfg, &v).unwrap();
                validate_knowledge(&s.knowledge, IMAGE_SIZE, IMAGE_SIZE).unwrap();
            }
        }
    }

    #[test]
    fn split_audit() {
        assert!(audit_splits(&[0..10, 10..20]).is_ok());
        assert!(matches!(audit_splits(&[0..10, 5..20]), Err(SynthError::SplitOverlap(..))));
        let v = Vocab::standard();
        assert_eq!(make_split(100, 10, &SynthConfig::default(), &v).unwrap().len(), 10);
    }

    #[test]
    fn metrics_counts() {
        let mut m = Metrics::default();
        m.record(TaskKind::LabelAt, &[5, 2], &[5, 2]);
        m.record(TaskKind::LabelAt, &[6, 2], &[5, 2]);
        m.record(TaskKind::SignText, &[7], &[7, 2]);
        assert_eq!(m.count(), 3);
        assert!((m.exact_match() - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.token_accuracy() - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.task_exact_match(TaskKind::LabelAt), Some(0.5));
    }

    #[test]
    fn shapes_fit_inside_cells() {
        for s in 0..3 {
            let px = shape_pixels(s);
            assert!(!px.is_empty());
            assert!(px.iter().all(|&(y, x)| y < CELL && x < CELL));
        }
    }
}
