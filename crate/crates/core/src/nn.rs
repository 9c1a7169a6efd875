//! Layers with explicit forward/backward passes.
//!
//! Activations are processed as packed row matrices: several sequences of
//! possibly different lengths are concatenated along the row axis and only
//! attention needs to know where each sequence starts ([`Segment`]).
//! Backward functions accumulate parameter gradients into an optional
//! gradient struct of the same type as the layer; passing `None` skips that
//! work for frozen layers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::math::{gemm, matmul, Real, View, ViewMut};
use crate::tensor::{join, ParamSet, Tensor};

pub(crate) fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

pub(crate) fn uniform_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new(-bound, bound).expect("valid bound");
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ---------------------------------------------------------------- linear

/// `y = x·W + b` with `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: normal_tensor(rng, &[d_in, d_out], (1.0 / d_in as f64).sqrt()),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (din, dout) = (self.d_in(), self.d_out());
        debug_assert_eq!(x.len(), rows * din);
        let mut y = vec![T::zero(); rows * dout];
        let beta = match &self.bias {
            Some(b) => {
                for r in y.chunks_exact_mut(dout) {
                    r.copy_from_slice(&b.data);
                }
                T::one()
            }
            None => T::zero(),
        };
        matmul(x, false, &self.weight.data, false, rows, din, dout, beta, &mut y);
        y
    }

    /// Returns `dx` when `need_dx`.
    pub fn backward(&self, x: &[T], dy: &[T], rows: usize, grad: Option<&mut Linear<T>>, need_dx: bool) -> Option<Vec<T>> {
        let (din, dout) = (self.d_in(), self.d_out());
        if let Some(g) = grad {
            matmul(x, true, dy, false, din, rows, dout, T::one(), &mut g.weight.data);
            if let Some(gb) = &mut g.bias {
                for r in dy.chunks_exact(dout) {
                    add_into(&mut gb.data, r);
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * din];
            matmul(dy, false, &self.weight.data, true, rows, dout, din, T::zero(), &mut dx);
            dx
        })
    }
}

impl<T: Real> ParamSet<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

// ------------------------------------------------------------------ LoRA

/// Low-rank update `(alpha / r)·B·A` on top of a frozen linear map.
///
/// `A` is `[r, d_in]`, `B` is `[d_out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub alpha: f64,
}

pub type LoraMap<T> = BTreeMap<String, LoraAdapter<T>>;

impl<T: Real> LoraAdapter<T> {
    /// `A` uniform in `±1/sqrt(d_in)`, `B = 0`.
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        LoraAdapter {
            a: uniform_tensor(rng, &[rank, d_in], 1.0 / (d_in as f64).sqrt()),
            b: Tensor::zeros(&[d_out, rank]),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape[0]
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank() as f64)
    }

    /// Adds the low-rank term into `y`; returns the rank-space activations `x·Aᵀ`.
    pub fn forward_into(&self, x: &[T], rows: usize, y: &mut [T]) -> Vec<T> {
        let (r, din) = (self.a.shape[0], self.a.shape[1]);
        let dout = self.b.shape[0];
        let mut u = vec![T::zero(); rows * r];
        matmul(x, false, &self.a.data, true, rows, din, r, T::zero(), &mut u);
        gemm(
            self.scale(),
            View::dense(&u, rows, r),
            View::dense(&self.b.data, dout, r).t(),
            T::one(),
            ViewMut::dense(y, rows, dout),
        );
        u
    }

    pub fn backward(&self, x: &[T], u: &[T], dy: &[T], rows: usize, grad: Option<&mut LoraAdapter<T>>, dx: Option<&mut [T]>) {
        let (r, din) = (self.a.shape[0], self.a.shape[1]);
        let dout = self.b.shape[0];
        let s = self.scale();
        let mut du = vec![T::zero(); rows * r];
        gemm(s, View::dense(dy, rows, dout), View::dense(&self.b.data, dout, r), T::zero(), ViewMut::dense(&mut du, rows, r));
        if let Some(g) = grad {
            gemm(s, View::dense(dy, rows, dout).t(), View::dense(u, rows, r), T::one(), ViewMut::dense(&mut g.b.data, dout, r));
            matmul(&du, true, x, false, r, rows, din, T::one(), &mut g.a.data);
        }
        if let Some(dx) = dx {
            matmul(&du, false, &self.a.data, false, rows, r, din, T::one(), dx);
        }
    }
}

impl<T: Real> ParamSet<T> for LoraAdapter<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "A"), &self.a));
        out.push((join(prefix, "B"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "A"), &mut self.a));
        out.push((join(prefix, "B"), &mut self.b));
    }
}

impl<T: Real> ParamSet<T> for LoraMap<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (name, a) in self {
            a.collect(&join(prefix, name), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (name, a) in self.iter_mut() {
            a.collect_mut(&join(prefix, name), out);
        }
    }
}

/// Where a layer finds its adapters: the shared map plus this layer's name.
#[derive(Clone, Copy)]
pub struct LoraSite<'a, T> {
    pub map: &'a LoraMap<T>,
    pub prefix: &'a str,
}

impl<'a, T> LoraSite<'a, T> {
    fn get(&self, slot: &str) -> Option<(String, &'a LoraAdapter<T>)> {
        let name = format!("{}.{}", self.prefix, slot);
        self.map.get(&name).map(|a| (name, a))
    }
}

struct AdaptedOut<T> {
    y: Vec<T>,
    u: Option<(String, Vec<T>)>,
}

fn adapted_forward<T: Real>(lin: &Linear<T>, site: Option<LoraSite<'_, T>>, slot: &str, x: &[T], rows: usize) -> AdaptedOut<T> {
    let mut y = lin.forward(x, rows);
    let u = site.and_then(|s| s.get(slot)).map(|(name, a)| {
        let u = a.forward_into(x, rows, &mut y);
        (name, u)
    });
    AdaptedOut { y, u }
}

#[allow(clippy::too_many_arguments)]
fn adapted_backward<T: Real>(
    lin: &Linear<T>,
    site: Option<LoraSite<'_, T>>,
    u: &Option<(String, Vec<T>)>,
    x: &[T],
    dy: &[T],
    rows: usize,
    grad: Option<&mut Linear<T>>,
    lora_grads: Option<&mut LoraMap<T>>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let mut dx = lin.backward(x, dy, rows, grad, need_dx);
    if let (Some(site), Some((name, u))) = (site, u) {
        let adapter = &site.map[name];
        let g = lora_grads.and_then(|m| m.get_mut(name));
        adapter.backward(x, u, dy, rows, g, dx.as_deref_mut());
    }
    dx
}

// ------------------------------------------------------------ layer norm

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        let mut gamma = Tensor::zeros(&[d]);
        gamma.fill(T::one());
        LayerNorm { gamma, beta: Tensor::zeros(&[d]) }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LnCache<T>) {
        let d = self.gamma.numel();
        let rows = x.len() / d;
        let dt = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dt;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (xr[i] - mean) * rs;
                xhat[r * d + i] = h;
                y[r * d + i] = h * self.gamma.data[i] + self.beta.data[i];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &[T], grad: Option<&mut LayerNorm<T>>) -> Vec<T> {
        let d = self.gamma.numel();
        let rows = dy.len() / d;
        let dt = T::lit(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut g = grad;
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            if let Some(g) = g.as_deref_mut() {
                for i in 0..d {
                    g.gamma.data[i] += dyr[i] * xh[i];
                    g.beta.data[i] += dyr[i];
                }
            }
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for i in 0..d {
                let gi = dyr[i] * self.gamma.data[i];
                mean_g += gi;
                mean_gx += gi * xh[i];
            }
            mean_g /= dt;
            mean_gx /= dt;
            let rs = cache.rstd[r];
            for i in 0..d {
                let gi = dyr[i] * self.gamma.data[i];
                dx[r * d + i] = rs * (gi - mean_g - xh[i] * mean_gx);
            }
        }
        dx
    }
}

impl<T: Real> ParamSet<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

// ------------------------------------------------------------ activations

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044_715);
    let half = T::lit(0.5);
    x.iter().map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh())).collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044_715);
    let k3 = T::lit(3.0 * 0.044_715);
    let half = T::lit(0.5);
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (c * (v + k * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + k3 * v * v);
            g * (half * (T::one() + t) + half * v * dt)
        })
        .collect()
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect()
}

// -------------------------------------------------------------- attention

/// One sequence inside a packed row matrix.
///
/// Positions `< prefix` attend bidirectionally among themselves; positions
/// `>= prefix` attend to every earlier position and to themselves. A fully
/// bidirectional sequence has `prefix == len`, a purely causal one `0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub prefix: usize,
}

impl Segment {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        if i < self.prefix {
            j < self.prefix
        } else {
            j <= i
        }
    }
}

/// Multi-head scaled dot-product attention. Returns the head-concatenated
/// output and the softmax probabilities (`heads × len × len` per segment).
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], d: usize, heads: usize, segs: &[Segment]) -> (Vec<T>, Vec<Vec<T>>) {
    let hd = d / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut all_probs = Vec::with_capacity(segs.len());
    for seg in segs {
        let (s0, n) = (seg.start * d, seg.len);
        let (qs, ks, vs) = (&q[s0..s0 + n * d], &k[s0..s0 + n * d], &v[s0..s0 + n * d]);
        let mut probs = vec![T::zero(); heads * n * n];
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(scale, View::cols(qs, n, d, h * hd, hd), View::cols(ks, n, d, h * hd, hd).t(), T::zero(), ViewMut::dense(p, n, n));
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = T::neg_infinity();
                for (j, &x) in row.iter().enumerate() {
                    if seg.allowed(i, j) && x > max {
                        max = x;
                    }
                }
                let mut sum = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    if seg.allowed(i, j) {
                        *x = (*x - max).exp();
                        sum += *x;
                    } else {
                        *x = T::zero();
                    }
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            let os = &mut out[s0..s0 + n * d];
            gemm(T::one(), View::dense(p, n, n), View::cols(vs, n, d, h * hd, hd), T::zero(), ViewMut::cols(os, n, d, h * hd, hd));
        }
        all_probs.push(probs);
    }
    (out, all_probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[Vec<T>],
    dout: &[T],
    d: usize,
    heads: usize,
    segs: &[Segment],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    for (seg, probs) in segs.iter().zip(probs) {
        let (s0, n) = (seg.start * d, seg.len);
        let r = s0..s0 + n * d;
        let (qs, ks, vs, dos) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &dout[r.clone()]);
        let mut dp = vec![T::zero(); n * n];
        for h in 0..heads {
            let p = &probs[h * n * n..(h + 1) * n * n];
            // dP = dO·Vᵀ ; dV = Pᵀ·dO
            gemm(T::one(), View::cols(dos, n, d, h * hd, hd), View::cols(vs, n, d, h * hd, hd).t(), T::zero(), ViewMut::dense(&mut dp, n, n));
            gemm(T::one(), View::dense(p, n, n).t(), View::cols(dos, n, d, h * hd, hd), T::zero(), ViewMut::cols(&mut dv[r.clone()], n, d, h * hd, hd));
            // softmax backward, in place on dp
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            gemm(scale, View::dense(&dp, n, n), View::cols(ks, n, d, h * hd, hd), T::zero(), ViewMut::cols(&mut dq[r.clone()], n, d, h * hd, hd));
            gemm(scale, View::dense(&dp, n, n).t(), View::cols(qs, n, d, h * hd, hd), T::zero(), ViewMut::cols(&mut dk[r.clone()], n, d, h * hd, hd));
        }
    }
    (dq, dk, dv)
}

// ------------------------------------------------------------------ block

/// Adapter slot names inside a block, in traversal order.
pub const LORA_SLOTS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"];

/// Pre-norm transformer block: `x + O(attn(LN(x)))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    q: AdaptedOut<T>,
    k: AdaptedOut<T>,
    v: AdaptedOut<T>,
    probs: Vec<Vec<T>>,
    att: Vec<T>,
    o_u: Option<(String, Vec<T>)>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f1: AdaptedOut<T>,
    g: Vec<T>,
    fc2_u: Option<(String, Vec<T>)>,
}

impl<T: Real> Block<T> {
    pub fn init(rng: &mut impl Rng, d: usize, hidden: usize) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            q: Linear::init(rng, d, d, true),
            k: Linear::init(rng, d, d, true),
            v: Linear::init(rng, d, d, true),
            o: Linear::init(rng, d, d, true),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(rng, d, hidden, true),
            fc2: Linear::init(rng, hidden, d, true),
        }
    }

    /// Shape of the matrix adapted at `slot`, as `(d_in, d_out)`.
    pub fn slot_dims(&self, slot: &str) -> Option<(usize, usize)> {
        let lin = match slot {
            "attn.q" => &self.q,
            "attn.k" => &self.k,
            "attn.v" => &self.v,
            "attn.o" => &self.o,
            "mlp.fc1" => &self.fc1,
            "mlp.fc2" => &self.fc2,
            _ => return None,
        };
        Some((lin.d_in(), lin.d_out()))
    }

    pub fn slot_linear(&self, slot: &str) -> Option<&Linear<T>> {
        match slot {
            "attn.q" => Some(&self.q),
            "attn.k" => Some(&self.k),
            "attn.v" => Some(&self.v),
            "attn.o" => Some(&self.o),
            "mlp.fc1" => Some(&self.fc1),
            "mlp.fc2" => Some(&self.fc2),
            _ => None,
        }
    }

    pub fn forward(&self, x: &[T], heads: usize, segs: &[Segment], lora: Option<LoraSite<'_, T>>) -> (Vec<T>, BlockCache<T>) {
        let d = self.q.d_in();
        let rows = x.len() / d;
        let (h1, ln1) = self.ln1.forward(x);
        let q = adapted_forward(&self.q, lora, "attn.q", &h1, rows);
        let k = adapted_forward(&self.k, lora, "attn.k", &h1, rows);
        let v = adapted_forward(&self.v, lora, "attn.v", &h1, rows);
        let (att, probs) = attention_forward(&q.y, &k.y, &v.y, d, heads, segs);
        let o = adapted_forward(&self.o, lora, "attn.o", &att, rows);
        let mut x2 = o.y;
        add_into(&mut x2, x);
        let (h2, ln2) = self.ln2.forward(&x2);
        let f1 = adapted_forward(&self.fc1, lora, "mlp.fc1", &h2, rows);
        let g = gelu(&f1.y);
        let f2 = adapted_forward(&self.fc2, lora, "mlp.fc2", &g, rows);
        let mut y = f2.y;
        add_into(&mut y, &x2);
        let cache = BlockCache { ln1, h1, q, k, v, probs, att, o_u: o.u, ln2, h2, f1, g, fc2_u: f2.u };
        (y, cache)
    }

    /// Backpropagate `dy` and return `dx`.
    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        dy: &[T],
        heads: usize,
        segs: &[Segment],
        lora: Option<LoraSite<'_, T>>,
        grad: Option<&mut Block<T>>,
        mut lora_grads: Option<&mut LoraMap<T>>,
    ) -> Vec<T> {
        let d = self.q.d_in();
        let rows = dy.len() / d;
        let mut grad = grad;
        // MLP branch
        let dg = adapted_backward(&self.fc2, lora, &cache.fc2_u, &cache.g, dy, rows, grad.as_deref_mut().map(|g| &mut g.fc2), lora_grads.as_deref_mut(), true)
            .expect("dx");
        let df1 = gelu_backward(&cache.f1.y, &dg);
        let dh2 = adapted_backward(&self.fc1, lora, &cache.f1.u, &cache.h2, &df1, rows, grad.as_deref_mut().map(|g| &mut g.fc1), lora_grads.as_deref_mut(), true)
            .expect("dx");
        let mut dx2 = self.ln2.backward(&cache.ln2, &dh2, grad.as_deref_mut().map(|g| &mut g.ln2));
        add_into(&mut dx2, dy);
        // attention branch
        let datt = adapted_backward(&self.o, lora, &cache.o_u, &cache.att, &dx2, rows, grad.as_deref_mut().map(|g| &mut g.o), lora_grads.as_deref_mut(), true)
            .expect("dx");
        let (dq, dk, dv) = attention_backward(&cache.q.y, &cache.k.y, &cache.v.y, &cache.probs, &datt, d, heads, segs);
        let mut dh1 = adapted_backward(&self.q, lora, &cache.q.u, &cache.h1, &dq, rows, grad.as_deref_mut().map(|g| &mut g.q), lora_grads.as_deref_mut(), true)
            .expect("dx");
        let dhk = adapted_backward(&self.k, lora, &cache.k.u, &cache.h1, &dk, rows, grad.as_deref_mut().map(|g| &mut g.k), lora_grads.as_deref_mut(), true)
            .expect("dx");
        let dhv = adapted_backward(&self.v, lora, &cache.v.u, &cache.h1, &dv, rows, grad.as_deref_mut().map(|g| &mut g.v), lora_grads.as_deref_mut(), true)
            .expect("dx");
        add_into(&mut dh1, &dhk);
        add_into(&mut dh1, &dhv);
        let mut dx = self.ln1.backward(&cache.ln1, &dh1, grad.as_deref_mut().map(|g| &mut g.ln1));
        add_into(&mut dx, &dx2);
        dx
    }
}

impl<T: Real> ParamSet<T> for Block<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.q.collect(&join(prefix, "attn.q"), out);
        self.k.collect(&join(prefix, "attn.k"), out);
        self.v.collect(&join(prefix, "attn.v"), out);
        self.o.collect(&join(prefix, "attn.o"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.fc1.collect(&join(prefix, "mlp.fc1"), out);
        self.fc2.collect(&join(prefix, "mlp.fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.q.collect_mut(&join(prefix, "attn.q"), out);
        self.k.collect_mut(&join(prefix, "attn.k"), out);
        self.v.collect_mut(&join(prefix, "attn.v"), out);
        self.o.collect_mut(&join(prefix, "attn.o"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.fc1.collect_mut(&join(prefix, "mlp.fc1"), out);
        self.fc2.collect_mut(&join(prefix, "mlp.fc2"), out);
    }
}
