//! `vpk`: build prompts, generate data, train, evaluate and inspect archives.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for validation or
//! data errors. Errors are printed to stderr as `ERROR:<code>: <message>`.

use std::fmt::Debug;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vpk_core::archive::{TensorArchive, TensorEntry};
use vpk_core::config::{EmbedderKind, RunConfig};
use vpk_core::io::write_atomic;
use vpk_core::knowledge::parse_knowledge;
use vpk_core::model::{Adapters, ModelParams};
use vpk_core::pen::{FusionMode, PenInit};
use vpk_core::raster::build_prompt;
use vpk_core::synth::{export_dataset, import_dataset, make_split, LabelMode, TaskKind, Vocab};
use vpk_core::train::{
    evaluate, format_row, load_checkpoint, load_params_from, save_checkpoint, EvalOptions, Injection, TrainSet, Trainable, Trainer,
};

#[derive(Parser)]
#[command(name = "vpk", version, about = "Visual prompts from external knowledge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a knowledge JSON file into an auxiliary prompt archive.
    BuildPrompt(BuildPromptArgs),
    /// Train the backbone (warm-up) or the adapters on a dataset directory.
    Train(TrainArgs),
    /// Greedy-decode a dataset and report exact-match accuracy.
    Eval(EvalArgs),
    /// Write a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Print name, shape, min, max and nonzero fraction of each tensor.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BuildPromptArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    knowledge: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `hash` or `table`.
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    salt: Option<String>,
    /// Embed-table JSON for `--embedder table`.
    #[arg(long)]
    table: Option<String>,
    /// Drop OCR regions before rasterizing.
    #[arg(long)]
    no_ocr: bool,
}

#[derive(Args)]
struct ModelFlags {
    /// `none` or `visual_prompt`.
    #[arg(long)]
    injection: Option<String>,
    /// `addition` or `concat`.
    #[arg(long)]
    fusion: Option<String>,
    /// `kaiming` or `zero_last`.
    #[arg(long)]
    pen_init: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Drop OCR regions from the knowledge.
    #[arg(long)]
    no_ocr: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (`step,loss,lr`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// `adapters` (backbone frozen) or `backbone` (warm-up, no prompt).
    #[arg(long, default_value = "adapters")]
    stage: String,
    /// Checkpoint whose backbone tensors initialize the model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue a previous run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write metrics JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `hidden_label` or `visible_label`.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated list of `label_at`, `count_color`, `sign_text`.
    #[arg(long)]
    tasks: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

struct Failure {
    code: String,
    message: String,
}

/// Error code from the variant name of `e`'s `Debug` output.
fn code_of<E: Debug>(e: &E) -> String {
    let dbg = format!("{e:?}");
    let mut code: String = dbg.chars().take_while(|c| c.is_alphanumeric()).collect();
    // Transparent wrappers: report the innermost variant.
    for wrapper in ["Model", "Raster", "Archive", "Knowledge", "Embed", "Synth", "Train", "Pen"] {
        if code == wrapper {
            let inner = &dbg[wrapper.len()..].trim_start_matches('(');
            let c: String = inner.chars().take_while(|c| c.is_alphanumeric()).collect();
            if !c.is_empty() {
                code = c;
            }
        }
    }
    code
}

fn fail<E: Debug + std::fmt::Display>(e: E) -> Failure {
    Failure { code: code_of(&e), message: e.to_string() }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure { code: "InvalidArgument".into(), message: msg.into() }
}

fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T, Failure> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|_| invalid(format!("--{flag}: unknown value {value:?}")))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    match &common.config {
        Some(p) => RunConfig::from_json(&std::fs::read(p).map_err(fail)?).map_err(fail),
        None => Ok(RunConfig::default()),
    }
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Result<(), Failure> {
    if let Some(v) = &f.injection {
        cfg.injection = parse_enum::<Injection>("injection", v)?;
    }
    if let Some(v) = &f.fusion {
        cfg.model.fusion = parse_enum::<FusionMode>("fusion", v)?;
    }
    if let Some(v) = &f.pen_init {
        cfg.model.pen_init = parse_enum::<PenInit>("pen-init", v)?;
    }
    if let Some(t) = f.tau {
        cfg.tau = t;
    }
    if f.no_ocr {
        cfg.ocr_enabled = false;
    }
    Ok(())
}

fn build_prompt_cmd(a: BuildPromptArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = &a.embedder {
        cfg.embedder.kind = parse_enum::<EmbedderKind>("embedder", e)?;
    }
    if let Some(d) = a.dim {
        cfg.model.prompt_dim = d;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(s) = a.salt {
        cfg.embedder.salt = s;
    }
    if a.table.is_some() {
        cfg.embedder.table = a.table;
    }
    if a.no_ocr {
        cfg.ocr_enabled = false;
    }
    let bytes = std::fs::read(&a.knowledge).map_err(fail)?;
    let mut k = parse_knowledge(&bytes).map_err(fail)?;
    if !cfg.ocr_enabled {
        k = k.without_ocr();
    }
    let encoder = cfg.embedder.build(cfg.model.prompt_dim).map_err(fail)?;
    let p = build_prompt(&k, encoder.as_ref(), cfg.model.prompt_dim, cfg.tau).map_err(fail)?;
    let values: Vec<f32> = p.data.iter().map(|&v| v as f32).collect();
    let mut archive = TensorArchive::new();
    archive.push("aux_prompt", TensorEntry::from_f32(&[p.height, p.width, p.dim], &values));
    archive.write_file(&a.out).map_err(fail)
}

fn gen_data_cmd(a: GenDataArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = &a.mode {
        cfg.data.mode = parse_enum::<LabelMode>("mode", m)?;
    }
    if let Some(t) = &a.tasks {
        cfg.data.tasks = t
            .split(',')
            .map(|s| TaskKind::parse(s.trim()).ok_or_else(|| invalid(format!("--tasks: unknown task {s:?}"))))
            .collect::<Result<_, _>>()?;
    }
    if a.n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    let vocab = Vocab::standard();
    let samples = make_split(a.seed, a.n, &cfg.data, &vocab).map_err(fail)?;
    export_dataset(&a.out, &samples, &vocab).map_err(fail)
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    apply_model_flags(&mut cfg, &a.model)?;
    let backbone_stage = match a.stage.as_str() {
        "adapters" => false,
        "backbone" => true,
        s => return Err(invalid(format!("--stage: unknown value {s:?}"))),
    };
    let train_cfg = if backbone_stage { &mut cfg.warmup.train } else { &mut cfg.train };
    if let Some(s) = a.steps {
        train_cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        train_cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        train_cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    let (samples, vocab) = import_dataset(&a.data).map_err(fail)?;
    cfg.model.vocab_size = vocab.len();
    cfg.validate().map_err(fail)?;

    let (mut params, mut trainer) = if let Some(r) = &a.resume {
        let (p, mut t) = load_checkpoint::<f32>(r).map_err(fail)?;
        if let Some(s) = a.steps {
            t.config.steps = s;
        }
        (p, t)
    } else {
        let mut p = ModelParams::<f32>::init(&cfg.model, cfg.seeds.backbone, cfg.seeds.adapters);
        if let Some(init) = &a.init {
            let archive = TensorArchive::read_file(init).map_err(fail)?;
            load_params_from(&mut p, &archive, true).map_err(fail)?;
            p.adapters = Adapters::init(&cfg.model, &p.backbone, cfg.seeds.adapters);
        }
        let (tc, tr) = if backbone_stage {
            (cfg.warmup.train.clone(), Trainable::DECODER)
        } else {
            (cfg.train.clone(), Trainable::ADAPTERS)
        };
        (p, Trainer::new(tc, tr))
    };
    if params.config.vocab_size != vocab.len() {
        return Err(invalid(format!("checkpoint vocabulary {} vs dataset {}", params.config.vocab_size, vocab.len())));
    }

    let use_prompt = !backbone_stage && cfg.injection == Injection::VisualPrompt;
    let encoder = cfg.embedder.build(params.config.prompt_dim).map_err(fail)?;
    let mut set = TrainSet::new(&samples);
    if !trainer.trainable.vision {
        set = set.with_vision_cache(&params, 64).map_err(fail)?;
    }
    if use_prompt {
        set = set.with_prompts(&samples, encoder.as_ref(), &params.config, cfg.tau, cfg.ocr_enabled).map_err(fail)?;
    }
    let mut csv = String::from("step,loss,lr\n");
    if let (Some(_), Some(log)) = (&a.resume, &a.log) {
        if let Ok(prev) = std::fs::read_to_string(log) {
            csv = prev;
        }
    }
    trainer.run(&mut params, &set, |r| csv.push_str(&format_row(r))).map_err(fail)?;
    save_checkpoint(&a.out, &params, &trainer).map_err(fail)?;
    if let Some(log) = &a.log {
        write_atomic(log, csv.as_bytes()).map_err(fail)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    apply_model_flags(&mut cfg, &a.model)?;
    let (params, _) = load_checkpoint::<f32>(&a.checkpoint).map_err(fail)?;
    let (samples, vocab) = import_dataset(&a.data).map_err(fail)?;
    if params.config.vocab_size != vocab.len() {
        return Err(invalid(format!("checkpoint vocabulary {} vs dataset {}", params.config.vocab_size, vocab.len())));
    }
    let encoder = cfg.embedder.build(params.config.prompt_dim).map_err(fail)?;
    let opts = EvalOptions {
        injection: cfg.injection,
        ocr_enabled: cfg.ocr_enabled,
        encoder: encoder.as_ref(),
        tau: cfg.tau,
        batch: 64,
        max_new: 4,
    };
    let m = evaluate(&params, &samples, &opts).map_err(fail)?;
    let per_task: serde_json::Map<String, serde_json::Value> = m
        .per_task
        .iter()
        .map(|(t, c)| {
            let v = serde_json::json!({
                "samples": c.samples,
                "exact_match": c.exact as f64 / c.samples.max(1) as f64,
                "token_accuracy": c.tokens_correct as f64 / c.tokens.max(1) as f64,
            });
            (t.name().to_string(), v)
        })
        .collect();
    let json = serde_json::json!({
        "samples": m.count(),
        "exact_match": m.exact_match(),
        "token_accuracy": m.token_accuracy(),
        "per_task": per_task,
    });
    let text = serde_json::to_string_pretty(&json).expect("metrics serialize");
    // A closed stdout (e.g. piped into `head`) is not an error.
    let _ = writeln!(std::io::stdout(), "{text}");
    if let Some(out) = &a.out {
        write_atomic(out, text.as_bytes()).map_err(fail)?;
    }
    Ok(())
}

/// Nonzero fraction counts positions along all but the last axis whose
/// last-axis vector has any nonzero entry; for a 1-D tensor, elements.
fn inspect_cmd(a: InspectArgs) -> Result<(), Failure> {
    let archive = TensorArchive::read_file(Path::new(&a.path)).map_err(fail)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "name\tshape\tmin\tmax\tnonzero_fraction");
    for (name, e) in &archive.entries {
        let v = e.to_f32();
        let inner = if e.shape().len() > 1 { *e.shape().last().expect("rank > 1") } else { 1 };
        let (min, max) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let (min, max) = if v.is_empty() { (0.0, 0.0) } else { (min, max) };
        let groups = if inner == 0 { 0 } else { v.len() / inner };
        let nonzero = if inner == 0 { 0 } else { v.chunks(inner).filter(|c| c.iter().any(|&x| x != 0.0)).count() };
        let frac = if groups == 0 { 0.0 } else { nonzero as f64 / groups as f64 };
        let shape: Vec<String> = e.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "{name}\t[{}]\t{min}\t{max}\t{frac}", shape.join(","));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("ERROR:usage: invalid command line");
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::BuildPrompt(a) => build_prompt_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::GenData(a) => gen_data_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.code == "InvalidArgument" => {
            eprintln!("ERROR:usage: {}", f.message);
            ExitCode::from(1)
        }
        Err(f) => {
            eprintln!("ERROR:{}: {}", f.code, f.message);
            ExitCode::from(2)
        }
    }
}
