//! Prompt rasterization, pooling, PEN and fusion against naive references.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpk_core::knowledge::{BBox, BitMask, ExternalKnowledge, OcrRegion, SegmentRegion};
use vpk_core::pen::{fuse, pen_forward, pen_init, pool_to_grid, Conv3x3, FusionMode, FusionParams, PenInit, PromptGrid, TokenFeatures};
use vpk_core::raster::{build_prompt, prompt_stats, AuxiliaryPrompt};
use vpk_core::tensor::Tensor;
use vpk_core::text_embed::{HashEncoder, TextEncoder};

#[test]
fn segment_and_ocr_overlap_adds() {
    let (h, w) = (6, 7);
    let mut bits = vec![false; h * w];
    for r in 1..4 {
        for c in 2..6 {
            bits[r * w + c] = true;
        }
    }
    let mut k = ExternalKnowledge::empty(h, w);
    k.segments.push(SegmentRegion { mask: BitMask::new(h, w, bits), class_label: "cat".into(), confidence: 0.9 });
    k.ocr.push(OcrRegion { bbox: BBox { x0: 4, y0: 2, x1: 7, y1: 6 }, text: "STOP".into(), confidence: 0.8 });
    let enc = HashEncoder::new(5, "s");
    let p = build_prompt(&k, &enc, 5, 0.5).unwrap();
    let t_seg = enc.embed("cat").unwrap().0;
    let t_ocr = enc.embed("STOP").unwrap().0;
    for r in 0..h {
        for c in 0..w {
            let in_seg = (1..4).contains(&r) && (2..6).contains(&c);
            let in_ocr = (2..6).contains(&r) && (4..7).contains(&c);
            let want: Vec<f64> = (0..5)
                .map(|i| {
                    let base = if in_seg { t_seg[i] } else { 0.0 };
                    if in_ocr { base + t_ocr[i] } else { base }
                })
                .collect();
            assert_eq!(p.pixel(r, c), want.as_slice(), "pixel ({r},{c})");
        }
    }
}

fn disjoint_segments(seed: u64) -> ExternalKnowledge {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
    let n = rng.random_range(1..=5);
    let owner: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..=n)).collect();
    let mut k = ExternalKnowledge::empty(h, w);
    for s in 1..=n {
        let bits = owner.iter().map(|&o| o == s).collect();
        k.segments.push(SegmentRegion {
            mask: BitMask::new(h, w, bits),
            class_label: format!("class{}", rng.random_range(0..3)),
            confidence: rng.random_range(0.0..1.0),
        });
    }
    k
}

proptest! {
    #[test]
    fn segment_order_does_not_matter(seed in any::<u64>(), rot in 0usize..5) {
        let k = disjoint_segments(seed);
        let mut permuted = k.clone();
        let r = rot % permuted.segments.len();
        permuted.segments.rotate_left(r);
        permuted.segments.reverse();
        let enc = HashEncoder::new(4, "vpk");
        let a = build_prompt(&k, &enc, 4, 0.5).unwrap();
        let b = build_prompt(&permuted, &enc, 4, 0.5).unwrap();
        prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn stats_match_recount(h in 1usize..9, w in 1usize..9, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * d).map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(-2.0..2.0) }).collect();
        let p = AuxiliaryPrompt { height: h, width: w, dim: d, data };
        let s = prompt_stats(&p);
        let mut nonzero = 0;
        let mut norms = Vec::new();
        let mut means = vec![0.0; d];
        for r in 0..h {
            for c in 0..w {
                let px = p.pixel(r, c);
                nonzero += px.iter().any(|&v| v != 0.0) as usize;
                norms.push(px.iter().map(|v| v * v).sum::<f64>().sqrt());
                for i in 0..d {
                    means[i] += px[i] / (h * w) as f64;
                }
            }
        }
        prop_assert!((s.nonzero_fraction - nonzero as f64 / (h * w) as f64).abs() < 1e-12);
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = norms.iter().cloned().fold(0.0, f64::max);
        prop_assert!((s.norm_extremes.0 - min).abs() < 1e-12 && (s.norm_extremes.1 - max).abs() < 1e-12);
        for (a, b) in s.channel_means.iter().zip(&means) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn pooling_matches_block_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = AuxiliaryPrompt { height: 8, width: 8, dim: 3, data };
    let g = pool_to_grid(&p, 4).unwrap();
    assert_eq!((g.h, g.w, g.c), (2, 2, 3));
    for gy in 0..2 {
        for gx in 0..2 {
            for ch in 0..3 {
                let vals: Vec<f64> =
                    (0..16).map(|i| p.pixel(gy * 4 + i / 4, gx * 4 + i % 4)[ch]).collect();
                let want = vals.iter().sum::<f64>() / 16.0;
                assert!((g.data[(gy * 2 + gx) * 3 + ch] - want).abs() <= 1e-7);
            }
        }
    }
}

// ------------------------------------------------------------------ PEN

fn naive_conv(x: &[f64], h: usize, w: usize, conv: &Conv3x3<f64>, relu_out: bool) -> Vec<f64> {
    let (ci, co) = (conv.kernel.shape[2], conv.kernel.shape[3]);
    let mut y = vec![0.0; h * w * co];
    for r in 0..h {
        for c in 0..w {
            for o in 0..co {
                let mut acc = conv.bias.data[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for i in 0..ci {
                            acc += x[(yy as usize * w + xx as usize) * ci + i] * conv.kernel.data[((ky * 3 + kx) * ci + i) * co + o];
                        }
                    }
                }
                y[(r * w + c) * co + o] = if relu_out { acc.max(0.0) } else { acc };
            }
        }
    }
    y
}

#[test]
fn pen_matches_naive_convolutions() {
    let mut params = pen_init::<f64>(4, 4, 16, PenInit::Kaiming);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for conv in [&mut params.conv1, &mut params.conv2, &mut params.conv3] {
        conv.bias.data.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    let (h, w) = (8, 8);
    let x: Vec<f64> = (0..h * w * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = pen_forward(&PromptGrid { h, w, c: 4, data: x.clone() }, &params).unwrap();
    assert_eq!((out.count, out.dim), (64, 16));
    let a = naive_conv(&x, h, w, &params.conv1, true);
    let b = naive_conv(&a, h, w, &params.conv2, true);
    let want = naive_conv(&b, h, w, &params.conv3, false);
    for (g, e) in out.data.iter().zip(&want) {
        assert!((g - e).abs() <= 1e-9, "{g} vs {e}");
    }
}

#[test]
fn zero_input_interior_is_constant() {
    let mut params = pen_init::<f64>(6, 3, 8, PenInit::Kaiming);
    params.conv1.bias.data.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64 - 0.3);
    let (h, w) = (8, 8);
    let out = pen_forward(&PromptGrid { h, w, c: 3, data: vec![0.0; h * w * 3] }, &params).unwrap();
    let at = |r: usize, c: usize| &out.data[(r * w + c) * 8..(r * w + c + 1) * 8];
    let reference = at(2, 2).to_vec();
    for r in 2..h - 2 {
        for c in 2..w - 2 {
            for (a, b) in at(r, c).iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn kaiming_kernel_std() {
    // fan_in = 9 · 4 = 36.
    let mut draws = Vec::new();
    for seed in 0..10 {
        let p = pen_init::<f64>(seed, 4, 128, PenInit::Kaiming);
        draws.extend_from_slice(&p.conv1.kernel.data);
    }
    assert!(draws.len() >= 10_000);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let want = (2.0f64 / 36.0).sqrt();
    assert!((std / want - 1.0).abs() <= 0.2, "std {std} vs {want}");
}

#[test]
fn concat_fusion_matches_matrix_vector_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 6;
    let grid = (2, 3);
    let n = grid.0 * grid.1;
    let mut rand_vec = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let fv = TokenFeatures::new(grid, d, rand_vec(n * d));
    let fp = TokenFeatures::new(grid, d, rand_vec(n * d));
    let params = FusionParams {
        mode: FusionMode::Concat,
        weight: Some(Tensor::from_vec(&[d, 2 * d], rand_vec(2 * d * d))),
        bias: Some(Tensor::from_vec(&[d], rand_vec(d))),
    };
    let out = fuse(&fv, &fp, &params).unwrap();
    let (wt, b) = (params.weight.as_ref().unwrap(), params.bias.as_ref().unwrap());
    for t in 0..n {
        let z: Vec<f64> = fv.data[t * d..(t + 1) * d].iter().chain(&fp.data[t * d..(t + 1) * d]).copied().collect();
        for o in 0..d {
            let want = b.data[o] + (0..2 * d).map(|i| wt.data[o * 2 * d + i] * z[i]).sum::<f64>();
            assert!((out.data[t * d + o] - want).abs() <= 1e-6);
        }
    }
}
