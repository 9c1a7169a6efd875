//! Finite-difference gradient checking shared by the test binaries.

#![allow(dead_code)]

use vpk_core::model::{Image, LossSpan, ModelConfig, ModelParams, Tokenized};
use vpk_core::pen::{FusionMode, PenInit};
use vpk_core::tensor::ParamSet;
use vpk_core::train::{batch_loss_and_grad, Batch, Trainable};

const NONE: Trainable = Trainable { backbone: false, vision: false, adapters: false };

pub fn tiny(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch: 4,
        d_model: 8,
        heads: 2,
        vision_blocks: 1,
        decoder_blocks: 1,
        mlp_hidden: 8,
        vocab_size: 7,
        max_len: 12,
        prompt_dim: 3,
        fusion,
        pen_init: PenInit::Kaiming,
        lora_rank: 2,
        lora_alpha: 4.0,
        ..ModelConfig::default()
    }
}

fn image(seed: u32) -> Image {
    let data = (0..8 * 8 * 3).map(|i| (((i as u32).wrapping_mul(2654435761u32) ^ seed) % 97) as f32 / 97.0).collect();
    Image { height: 8, width: 8, data }
}

fn perturb_all(p: &mut ModelParams<f64>, seed: u64) {
    let mut s = seed;
    for (_, t) in p.named_mut() {
        for v in &mut t.data {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v += ((s >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.2;
        }
    }
}

/// Central-difference check of every gradient `trainable` produces.
/// Returns the number of scalars checked and the worst relative error.
pub fn check(fusion: FusionMode, trainable: Trainable, span: LossSpan) -> (usize, f64) {
    let mut params: ModelParams<f64> = ModelParams::init(&tiny(fusion), 11, 12);
    perturb_all(&mut params, 5);
    let imgs = [image(1), image(2)];
    let prompts: Vec<Vec<f64>> = (0..2).map(|k| (0..4 * 3).map(|i| ((i * 7 + k * 3) % 5) as f64 / 5.0 - 0.3).collect()).collect();
    let toks = [
        Tokenized { question: vec![1, 3, 4], answer: vec![5, 2] },
        Tokenized { question: vec![1, 6], answer: vec![4, 3, 2] },
    ];
    let batch = || Batch {
        images: imgs.iter().collect(),
        vision: None,
        prompts: Some(prompts.iter().map(|p| p.as_slice()).collect()),
        tokens: toks.iter().collect(),
    };
    let (_, grads) = batch_loss_and_grad(&params, &batch(), span, trainable).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.named().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (name, g) in &analytic {
        let full = name.clone();
        for i in 0..g.len() {
            let set = |p: &mut ModelParams<f64>, delta: f64| {
                for (n, t) in p.named_mut() {
                    if n == full {
                        t.data[i] += delta;
                    }
                }
            };
            let mut plus = params.clone();
            set(&mut plus, eps);
            let mut minus = params.clone();
            set(&mut minus, -eps);
            let lp = batch_loss_and_grad(&plus, &batch(), span, NONE).unwrap().0;
            let lm = batch_loss_and_grad(&minus, &batch(), span, NONE).unwrap().0;
            let num = (lp - lm) / (2.0 * eps);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
            if rel > 1e-4 {
                eprintln!("{name}[{i}]: analytic {} numeric {num} rel {rel}", g[i]);
            }
            worst = worst.max(rel);
            count += 1;
        }
    }
    (count, worst)
}
