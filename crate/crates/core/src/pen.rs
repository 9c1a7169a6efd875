//! Prompt embedding network and feature fusion.
//!
//! The auxiliary prompt is first area-averaged onto the image-token grid,
//! then passed through three shape-preserving 3×3 convolutions with ReLU
//! between them (channel plan `d → d_v → d_v → d_v`). The resulting prompt
//! features are combined with the image tokens either by elementwise
//! addition or by concatenation followed by a linear map back to `d_v`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{gemm, matmul, Real, View, ViewMut};
use crate::nn::{normal_tensor, relu, relu_backward};
use crate::raster::AuxiliaryPrompt;
use crate::tensor::{join, ParamSet, Tensor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PenError {
    #[error("patch size {patch} does not divide {height}x{width}")]
    IndivisiblePatch { patch: usize, height: usize, width: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// `count × dim` token matrix laid out on an `h × w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures<T> {
    pub count: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    pub data: Vec<T>,
}

impl<T: Real> TokenFeatures<T> {
    pub fn new(grid: (usize, usize), dim: usize, data: Vec<T>) -> Self {
        let count = grid.0 * grid.1;
        assert_eq!(data.len(), count * dim, "token data length");
        TokenFeatures { count, dim, grid, data }
    }

    pub fn zeros(grid: (usize, usize), dim: usize) -> Self {
        Self::new(grid, dim, vec![T::zero(); grid.0 * grid.1 * dim])
    }
}

/// `h × w × c` channels-last grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGrid<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> PromptGrid<T> {
    pub fn cast<U: Real>(&self) -> PromptGrid<U> {
        PromptGrid { h: self.h, w: self.w, c: self.c, data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect() }
    }
}

/// Mean over each non-overlapping `patch × patch` block, per channel.
pub fn pool_to_grid(p: &AuxiliaryPrompt, patch: usize) -> Result<PromptGrid<f64>, PenError> {
    if patch == 0 || p.height % patch != 0 || p.width % patch != 0 {
        return Err(PenError::IndivisiblePatch { patch, height: p.height, width: p.width });
    }
    let (h, w, c) = (p.height / patch, p.width / patch, p.dim);
    let mut data = vec![0.0; h * w * c];
    let inv = 1.0 / (patch * patch) as f64;
    for gy in 0..h {
        for gx in 0..w {
            let cell = &mut data[(gy * w + gx) * c..(gy * w + gx + 1) * c];
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    for (acc, &v) in cell.iter_mut().zip(p.pixel(y, x)) {
                        *acc += v;
                    }
                }
            }
            cell.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(PromptGrid { h, w, c, data })
}

// ------------------------------------------------------------ convolution

/// 3×3, stride 1, zero-padding 1; kernel stored `[3, 3, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

fn im2col<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); n * h * w * 9 * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for i in 0..c {
                            dx[dst + i] += cols[src + i];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<T: Real> Conv3x3<T> {
    pub fn c_in(&self) -> usize {
        self.kernel.shape[2]
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape[3]
    }

    /// `x` holds `n` grids of `h × w × c_in`. Returns output and the im2col matrix.
    pub fn forward(&self, x: &[T], n: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>) {
        let (ci, co) = (self.c_in(), self.c_out());
        let cols = im2col(x, n, h, w, ci);
        let rows = n * h * w;
        let mut y = vec![T::zero(); rows * co];
        for r in y.chunks_exact_mut(co) {
            r.copy_from_slice(&self.bias.data);
        }
        matmul(&cols, false, &self.kernel.data, false, rows, 9 * ci, co, T::one(), &mut y);
        (y, cols)
    }

    pub fn backward(&self, cols: &[T], dy: &[T], n: usize, h: usize, w: usize, grad: Option<&mut Conv3x3<T>>, need_dx: bool) -> Option<Vec<T>> {
        let (ci, co) = (self.c_in(), self.c_out());
        let rows = n * h * w;
        if let Some(g) = grad {
            matmul(cols, true, dy, false, 9 * ci, rows, co, T::one(), &mut g.kernel.data);
            for r in dy.chunks_exact(co) {
                for (b, &v) in g.bias.data.iter_mut().zip(r) {
                    *b += v;
                }
            }
        }
        need_dx.then(|| {
            let mut dcols = vec![T::zero(); rows * 9 * ci];
            matmul(dy, false, &self.kernel.data, true, rows, co, 9 * ci, T::zero(), &mut dcols);
            col2im(&dcols, n, h, w, ci)
        })
    }
}

impl<T: Real> ParamSet<T> for Conv3x3<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "kernel"), &self.kernel));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "kernel"), &mut self.kernel));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

// -------------------------------------------------------------------- PEN

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenInit {
    #[default]
    Kaiming,
    /// Kaiming for the first two layers, all-zero final layer.
    ZeroLast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenParams<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
    pub conv3: Conv3x3<T>,
}

impl<T: Real> ParamSet<T> for PenParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        self.conv3.collect(&join(prefix, "conv3"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.conv1.collect_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_mut(&join(prefix, "conv2"), out);
        self.conv3.collect_mut(&join(prefix, "conv3"), out);
    }
}

/// Fan-in scaled normal kernels (`std = sqrt(2 / (9·c_in))`), zero biases.
pub fn pen_init<T: Real>(seed: u64, d: usize, d_v: usize, mode: PenInit) -> PenParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |ci: usize, co: usize, zero: bool| Conv3x3 {
        kernel: normal_tensor(&mut rng, &[3, 3, ci, co], if zero { 0.0 } else { (2.0 / (9 * ci) as f64).sqrt() }),
        bias: Tensor::zeros(&[co]),
    };
    PenParams {
        conv1: conv(d, d_v, false),
        conv2: conv(d_v, d_v, false),
        conv3: conv(d_v, d_v, mode == PenInit::ZeroLast),
    }
}

pub struct PenCache<T> {
    n: usize,
    h: usize,
    w: usize,
    cols1: Vec<T>,
    a1: Vec<T>,
    cols2: Vec<T>,
    a2: Vec<T>,
    cols3: Vec<T>,
}

impl<T: Real> PenParams<T> {
    pub fn in_dim(&self) -> usize {
        self.conv1.c_in()
    }

    pub fn out_dim(&self) -> usize {
        self.conv3.c_out()
    }

    /// Batched forward over `n` grids of `h × w × d`; output is `n·h·w × d_v`.
    pub fn forward_batch(&self, x: &[T], n: usize, h: usize, w: usize) -> (Vec<T>, PenCache<T>) {
        let (a1, cols1) = self.conv1.forward(x, n, h, w);
        let (a2, cols2) = self.conv2.forward(&relu(&a1), n, h, w);
        let (y, cols3) = self.conv3.forward(&relu(&a2), n, h, w);
        (y, PenCache { n, h, w, cols1, a1, cols2, a2, cols3 })
    }

    /// Accumulates parameter gradients; the prompt itself needs no gradient.
    pub fn backward_batch(&self, cache: &PenCache<T>, dy: &[T], grad: &mut PenParams<T>) {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let dr2 = self.conv3.backward(&cache.cols3, dy, n, h, w, Some(&mut grad.conv3), true).expect("dx");
        let da2 = relu_backward(&cache.a2, &dr2);
        let dr1 = self.conv2.backward(&cache.cols2, &da2, n, h, w, Some(&mut grad.conv2), true).expect("dx");
        let da1 = relu_backward(&cache.a1, &dr1);
        self.conv1.backward(&cache.cols1, &da1, n, h, w, Some(&mut grad.conv1), false);
    }
}

/// Three-layer conv stack over one grid, flattened row-major to tokens.
pub fn pen_forward<T: Real>(g: &PromptGrid<T>, params: &PenParams<T>) -> Result<TokenFeatures<T>, PenError> {
    if g.c != params.in_dim() || g.data.len() != g.h * g.w * g.c {
        return Err(PenError::ShapeMismatch(format!(
            "grid {}x{}x{} vs PEN input dim {}",
            g.h,
            g.w,
            g.c,
            params.in_dim()
        )));
    }
    let (y, _) = params.forward_batch(&g.data, 1, g.h, g.w);
    Ok(TokenFeatures::new((g.h, g.w), params.out_dim(), y))
}

// ----------------------------------------------------------------- fusion

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Addition,
    Concat,
}

/// `weight` is `[d_v, 2·d_v]` and acts on the column vector `[F_v; F_p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub mode: FusionMode,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> FusionParams<T> {
    pub fn addition() -> Self {
        FusionParams { mode: FusionMode::Addition, weight: None, bias: None }
    }

    /// Identity block `[I | 0]` with zero bias.
    pub fn concat_identity(d_v: usize) -> Self {
        let mut w = Tensor::zeros(&[d_v, 2 * d_v]);
        for i in 0..d_v {
            w.data[i * 2 * d_v + i] = T::one();
        }
        FusionParams { mode: FusionMode::Concat, weight: Some(w), bias: Some(Tensor::zeros(&[d_v])) }
    }

    pub fn new(mode: FusionMode, d_v: usize) -> Self {
        match mode {
            FusionMode::Addition => Self::addition(),
            FusionMode::Concat => Self::concat_identity(d_v),
        }
    }

    /// Row-wise fusion of two `rows × d_v` matrices.
    pub fn forward_rows(&self, fv: &[T], fp: &[T], d_v: usize) -> Vec<T> {
        let rows = fv.len() / d_v;
        match self.mode {
            FusionMode::Addition => fv.iter().zip(fp).map(|(&a, &b)| a + b).collect(),
            FusionMode::Concat => {
                let w = &self.weight.as_ref().expect("concat weight").data;
                let b = &self.bias.as_ref().expect("concat bias").data;
                let mut y = vec![T::zero(); rows * d_v];
                for r in y.chunks_exact_mut(d_v) {
                    r.copy_from_slice(b);
                }
                gemm(T::one(), View::dense(fv, rows, d_v), View::cols(w, d_v, 2 * d_v, 0, d_v).t(), T::one(), ViewMut::dense(&mut y, rows, d_v));
                gemm(T::one(), View::dense(fp, rows, d_v), View::cols(w, d_v, 2 * d_v, d_v, d_v).t(), T::one(), ViewMut::dense(&mut y, rows, d_v));
                y
            }
        }
    }

    /// Returns `(dF_v, dF_p)`; parameter gradients go to `grad` in concat mode.
    pub fn backward_rows(&self, fv: &[T], fp: &[T], dy: &[T], d_v: usize, grad: Option<&mut FusionParams<T>>) -> (Vec<T>, Vec<T>) {
        let rows = fv.len() / d_v;
        match self.mode {
            FusionMode::Addition => (dy.to_vec(), dy.to_vec()),
            FusionMode::Concat => {
                let w = &self.weight.as_ref().expect("concat weight").data;
                if let Some(g) = grad {
                    let gw = &mut g.weight.as_mut().expect("grad weight").data;
                    gemm(T::one(), View::dense(dy, rows, d_v).t(), View::dense(fv, rows, d_v), T::one(), ViewMut::cols(gw, d_v, 2 * d_v, 0, d_v));
                    gemm(T::one(), View::dense(dy, rows, d_v).t(), View::dense(fp, rows, d_v), T::one(), ViewMut::cols(gw, d_v, 2 * d_v, d_v, d_v));
                    let gb = &mut g.bias.as_mut().expect("grad bias").data;
                    for r in dy.chunks_exact(d_v) {
                        for (b, &v) in gb.iter_mut().zip(r) {
                            *b += v;
                        }
                    }
                }
                let mut dfv = vec![T::zero(); rows * d_v];
                let mut dfp = vec![T::zero(); rows * d_v];
                gemm(T::one(), View::dense(dy, rows, d_v), View::cols(w, d_v, 2 * d_v, 0, d_v), T::zero(), ViewMut::dense(&mut dfv, rows, d_v));
                gemm(T::one(), View::dense(dy, rows, d_v), View::cols(w, d_v, 2 * d_v, d_v, d_v), T::zero(), ViewMut::dense(&mut dfp, rows, d_v));
                (dfv, dfp)
            }
        }
    }
}

impl<T: Real> ParamSet<T> for FusionParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(w) = &self.weight {
            out.push((join(prefix, "weight"), w));
        }
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(w) = &mut self.weight {
            out.push((join(prefix, "weight"), w));
        }
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Combine image tokens with prompt features; the token count is preserved.
pub fn fuse<T: Real>(fv: &TokenFeatures<T>, fp: &TokenFeatures<T>, params: &FusionParams<T>) -> Result<TokenFeatures<T>, PenError> {
    if fv.count != fp.count || fv.dim != fp.dim {
        return Err(PenError::ShapeMismatch(format!(
            "image tokens {}x{} vs prompt features {}x{}",
            fv.count, fv.dim, fp.count, fp.dim
        )));
    }
    if let Some(w) = &params.weight {
        if w.shape != [fv.dim, 2 * fv.dim] {
            return Err(PenError::ShapeMismatch(format!("fusion weight {:?} for d_v={}", w.shape, fv.dim)));
        }
    }
    Ok(TokenFeatures::new(fv.grid, fv.dim, params.forward_rows(&fv.data, &fp.data, fv.dim)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_constant_and_identity() {
        let mut p = AuxiliaryPrompt::zeros(4, 6, 2);
        p.data.iter_mut().for_each(|v| *v = 0.25);
        let g = pool_to_grid(&p, 2).unwrap();
        assert_eq!((g.h, g.w, g.c), (2, 3, 2));
        assert!(g.data.iter().all(|&v| v == 0.25));
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        assert_eq!(pool_to_grid(&p, 1).unwrap().data, p.data);
        assert_eq!(
            pool_to_grid(&p, 4).unwrap_err(),
            PenError::IndivisiblePatch { patch: 4, height: 4, width: 6 }
        );
    }

    #[test]
    fn pen_output_shape_and_zero_last() {
        let g = PromptGrid { h: 8, w: 8, c: 4, data: (0..256).map(|i| (i as f64 * 0.1).sin()).collect() };
        let params: PenParams<f64> = pen_init(1, 4, 16, PenInit::Kaiming);
        let out = pen_forward(&g, &params).unwrap();
        assert_eq!((out.count, out.dim), (64, 16));
        let zl: PenParams<f64> = pen_init(1, 4, 16, PenInit::ZeroLast);
        assert!(pen_forward(&g, &zl).unwrap().data.iter().all(|&v| v == 0.0));
        let bad = PromptGrid { h: 8, w: 8, c: 3, data: vec![0.0; 192] };
        assert!(matches!(pen_forward(&bad, &params), Err(PenError::ShapeMismatch(_))));
    }

    #[test]
    fn pen_init_is_deterministic() {
        let a: PenParams<f32> = pen_init(9, 3, 5, PenInit::Kaiming);
        let b: PenParams<f32> = pen_init(9, 3, 5, PenInit::Kaiming);
        assert_eq!(a, b);
    }

    #[test]
    fn fuse_identities() {
        let fv = TokenFeatures::new((2, 2), 3, (0..12).map(|i| i as f32 * 0.7 - 2.0).collect());
        let zero = TokenFeatures::zeros((2, 2), 3);
        assert_eq!(fuse(&fv, &zero, &FusionParams::addition()).unwrap(), fv);
        let fp = TokenFeatures::new((2, 2), 3, (0..12).map(|i| i as f32).collect());
        let out = fuse(&fv, &fp, &FusionParams::concat_identity(3)).unwrap();
        for (a, b) in out.data.iter().zip(&fv.data) {
            assert!((a - b).abs() <= 1e-7);
        }
        let small = TokenFeatures::zeros((1, 2), 3);
        assert!(matches!(fuse(&fv, &small, &FusionParams::addition()), Err(PenError::ShapeMismatch(_))));
    }
}
