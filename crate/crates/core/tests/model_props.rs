//! Decoder, LoRA, loss and decoding checks against naive references.

use proptest::prelude::*;
use vpk_core::model::{
    answer_loss, decoder_forward, greedy_decode, lora_apply, vision_encode, Image, ModelConfig, ModelParams, Tokenized,
    EOS_ID,
};
use vpk_core::pen::TokenFeatures;
use vpk_core::tensor::ParamSet;

fn perturb(p: &mut ModelParams<f64>, seed: u64, scale: f64, only_frozen: bool) {
    let mut s = seed;
    for (n, t) in p.named_mut() {
        if only_frozen && !n.starts_with("backbone.") {
            continue;
        }
        for v in &mut t.data {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v += ((s >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * scale;
        }
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch: 4,
        d_model: 8,
        heads: 2,
        vision_blocks: 1,
        decoder_blocks: 2,
        mlp_hidden: 16,
        vocab_size: 11,
        max_len: 16,
        prompt_dim: 3,
        ..ModelConfig::default()
    }
}

fn image(seed: u32, size: usize) -> Image {
    let data = (0..size * size * 3).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 101) as f32 / 101.0).collect();
    Image { height: size, width: size, data }
}

fn fused(params: &ModelParams<f64>, seed: u32) -> TokenFeatures<f64> {
    vision_encode(&image(seed, params.config.image_size), params).unwrap()
}

// ------------------------------------------------------------ hand oracle

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b).collect()
}

/// `x·W + b` with `W` stored `[d_in, d_out]`.
fn lin(x: &[f64], w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    (0..d_out)
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * d_out + j]).sum::<f64>() + b.map_or(0.0, |b| b[j]))
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

#[test]
fn one_block_decoder_matches_hand_rolled_attention() {
    let cfg = ModelConfig {
        image_size: 4,
        patch: 4,
        d_model: 4,
        heads: 1,
        vision_blocks: 1,
        decoder_blocks: 1,
        mlp_hidden: 6,
        vocab_size: 5,
        max_len: 3,
        prompt_dim: 2,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::<f64>::init(&cfg, 3, 4);
    perturb(&mut p, 9, 0.6, true);
    let f = fused(&p, 1);
    assert_eq!(f.count, 1);
    let s = Tokenized { question: vec![1], answer: vec![3] };
    let got = decoder_forward(&f, &s, &p).unwrap();
    assert_eq!(got.len(), 2 * 5);

    let bb = &p.backbone;
    let blk = &bb.decoder_blocks[0];
    let d = 4;
    let tok = |id: usize| &bb.token_embed.data[id * d..(id + 1) * d];
    let inputs = [f.data.clone(), tok(1).to_vec(), tok(3).to_vec()];
    let x: Vec<Vec<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(pos, v)| v.iter().zip(&bb.pos_embed.data[pos * d..(pos + 1) * d]).map(|(a, b)| a + b).collect())
        .collect();
    let bias = |l: &vpk_core::nn::Linear<f64>| l.bias.as_ref().map(|b| b.data.clone());
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &blk.ln1.gamma.data, &blk.ln1.beta.data)).collect();
    let proj = |l: &vpk_core::nn::Linear<f64>, r: &[f64]| lin(r, &l.weight.data, bias(l).as_deref(), d);
    let q: Vec<_> = h.iter().map(|r| proj(&blk.q, r)).collect();
    let k: Vec<_> = h.iter().map(|r| proj(&blk.k, r)).collect();
    let v: Vec<_> = h.iter().map(|r| proj(&blk.v, r)).collect();
    let mut logits = Vec::new();
    for i in 0..3 {
        // Prefix-LM: the image token sees only itself; text sees the image
        // and earlier text.
        let keys: Vec<usize> = if i == 0 { vec![0] } else { (0..=i).collect() };
        let scores: Vec<f64> =
            keys.iter().map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let att: Vec<f64> = (0..d).map(|c| keys.iter().zip(&e).map(|(&j, w)| w / z * v[j][c]).sum()).collect();
        let x2: Vec<f64> = proj(&blk.o, &att).iter().zip(&x[i]).map(|(a, b)| a + b).collect();
        let h2 = ln(&x2, &blk.ln2.gamma.data, &blk.ln2.beta.data);
        let g: Vec<f64> = lin(&h2, &blk.fc1.weight.data, bias(&blk.fc1).as_deref(), 6).into_iter().map(gelu).collect();
        let y: Vec<f64> = proj(&blk.fc2, &g).iter().zip(&x2).map(|(a, b)| a + b).collect();
        if i > 0 {
            let n = ln(&y, &bb.final_norm.gamma.data, &bb.final_norm.beta.data);
            logits.extend(lin(&n, &bb.output_head.weight.data, None, 5));
        }
    }
    for (a, b) in got.iter().zip(&logits) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

// ------------------------------------------------------------ LoRA

#[test]
fn lora_matches_dense_update() {
    let mut p = ModelParams::<f64>::init(&small(), 1, 2);
    perturb(&mut p, 4, 0.5, false);
    let rows = 3;
    for name in ["decoder.0.attn.q", "decoder.1.mlp.fc1", "decoder.1.mlp.fc2"] {
        let ad = &p.adapters.lora[name];
        let (r, din) = (ad.a.shape[0], ad.a.shape[1]);
        let dout = ad.b.shape[0];
        let x: Vec<f64> = (0..rows * din).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.4).collect();
        let got = lora_apply(name, &x, rows, &p).unwrap();
        let (blk, slot) = name.strip_prefix("decoder.").unwrap().split_once('.').unwrap();
        let base = p.backbone.decoder_blocks[blk.parse::<usize>().unwrap()].slot_linear(slot).unwrap();
        let s = ad.alpha / r as f64;
        for row in 0..rows {
            let xr = &x[row * din..(row + 1) * din];
            for o in 0..dout {
                // Dense (W_base + s·B·A) acting on x, with W_base stored transposed.
                let mut want = base.bias.as_ref().map_or(0.0, |b| b.data[o]);
                for i in 0..din {
                    let ba: f64 = (0..r).map(|t| ad.b.data[o * r + t] * ad.a.data[t * din + i]).sum();
                    want += (base.weight.data[i * dout + o] + s * ba) * xr[i];
                }
                let y = got[row * dout + o];
                assert!((y - want).abs() <= 1e-6, "{name}: {y} vs {want}");
            }
        }
    }
}

// ------------------------------------------------------------ causality

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_tokens_do_not_change_earlier_logits(
        seed in 0u64..1000,
        answer in prop::collection::vec(3u32..11, 2..6),
        j_frac in 0.0f64..1.0,
        replacement in 3u32..11,
    ) {
        let mut p = ModelParams::<f64>::init(&small(), seed, seed + 1);
        perturb(&mut p, seed, 0.3, false);
        let f = fused(&p, seed as u32);
        let question = vec![1, 4, 5];
        let s = Tokenized { question: question.clone(), answer: answer.clone() };
        let base = decoder_forward(&f, &s, &p).unwrap();
        prop_assert_eq!(base.len(), (question.len() + answer.len()) * 11);
        let j = (j_frac * answer.len() as f64) as usize;
        let mut changed = answer.clone();
        changed[j] = replacement;
        let other = decoder_forward(&f, &Tokenized { question: question.clone(), answer: changed }, &p).unwrap();
        let cut = (question.len() + j) * 11;
        prop_assert!(base[..cut].iter().zip(&other[..cut]).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn batching_matches_single_samples(seed in 0u64..1000, lens in prop::collection::vec(1usize..6, 1..4)) {
        let mut p = ModelParams::<f64>::init(&small(), seed, seed + 7);
        perturb(&mut p, seed + 3, 0.3, false);
        let feats: Vec<_> = (0..lens.len()).map(|i| fused(&p, seed as u32 + i as u32)).collect();
        let texts: Vec<Vec<u32>> = lens.iter().enumerate().map(|(i, &n)| (0..n as u32).map(|t| (t * 3 + i as u32) % 11).collect()).collect();
        let all: Vec<f64> = feats.iter().flat_map(|f| f.data.clone()).collect();
        let refs: Vec<&[u32]> = texts.iter().map(|t| t.as_slice()).collect();
        let (batched, _) = p.decoder_forward_batch(&all, feats[0].count, &refs).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let (single, _) = p.decoder_forward_batch(&feats[i].data, feats[i].count, &[t.as_slice()]).unwrap();
            for (a, b) in batched[i].iter().zip(&single[0]) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}

// ------------------------------------------------------------ vision

#[test]
fn identical_images_give_identical_tokens() {
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 1, 2);
    let a = vision_encode(&image(5, 32), &p).unwrap();
    let b = vision_encode(&image(5, 32), &p).unwrap();
    assert_eq!(a.count, 64);
    assert_eq!(a.dim, 64);
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
}

// ------------------------------------------------------------ loss

#[test]
fn confident_correct_logits_give_small_loss() {
    let v = 10;
    let s = Tokenized { question: vec![1, 2], answer: vec![7, 2] };
    let mut logits = vec![0.0f64; 4 * v];
    for (i, &a) in s.answer.iter().enumerate() {
        logits[(s.question.len() - 1 + i) * v + a as usize] = 20.0;
    }
    assert!(answer_loss(&logits, v, &s) < 1e-3);
}

proptest! {
    #[test]
    fn loss_matches_brute_force(
        logits in prop::collection::vec(-8.0f64..8.0, 6 * 9),
        answer in prop::collection::vec(0u32..9, 1..4),
    ) {
        let v = 9;
        let question = vec![1u32; 6 - answer.len()];
        let s = Tokenized { question: question.clone(), answer: answer.clone() };
        let mut want = 0.0;
        for (i, &a) in answer.iter().enumerate() {
            let row = &logits[(question.len() - 1 + i) * v..(question.len() + i) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            want -= (row[a as usize].exp() / z).ln();
        }
        want /= answer.len() as f64;
        prop_assert!((answer_loss(&logits, v, &s) - want).abs() <= 1e-6);
    }
}

// ------------------------------------------------------------ decoding

#[test]
fn eos_favoring_head_stops_immediately() {
    let mut p = ModelParams::<f64>::init(&small(), 1, 2);
    let bb = &mut p.backbone;
    bb.final_norm.gamma.fill(0.0);
    bb.final_norm.beta.fill(1.0);
    bb.output_head.weight.fill(0.0);
    for row in 0..8 {
        bb.output_head.weight.data[row * 11 + EOS_ID as usize] = 1.0;
    }
    let out = greedy_decode(&fused(&p, 3), &[1, 4, 5], &p, 5).unwrap();
    assert_eq!(out, vec![EOS_ID]);
}

#[test]
fn greedy_matches_stepwise_argmax() {
    let mut p = ModelParams::<f64>::init(&small(), 21, 22);
    perturb(&mut p, 8, 1.5, false);
    for seed in 0..6 {
        let f = fused(&p, seed);
        let question = vec![1, 3 + seed % 5, 6];
        let got = greedy_decode(&f, &question, &p, 6).unwrap();
        let mut answer: Vec<u32> = Vec::new();
        for _ in 0..6 {
            // Logits of the last text position with the answer so far.
            let s = Tokenized { question: question.clone(), answer: answer.clone() };
            let text_logits = decoder_forward(&f, &s, &p).unwrap();
            let last = &text_logits[text_logits.len() - 11..];
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            answer.push(best as u32);
            if best as u32 == EOS_ID {
                break;
            }
        }
        assert_eq!(got, answer, "sample {seed}");
    }
}
