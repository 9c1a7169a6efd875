//! Owned dense tensors and named parameter collections.

use crate::math::Real;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64()).expect("cast")).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A structure that owns named tensors in a fixed, deterministic order.
///
/// The same traversal order is used for parameters, gradients and optimizer
/// moments, so collections produced from clones of one value can be zipped.
pub trait ParamSet<T: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    /// Clone with every tensor zeroed; used as a gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(T::zero());
        }
        z
    }

    fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<T: Real, P: ParamSet<T>> ParamSet<T> for Option<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(p) = self {
            p.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(p) = self {
            p.collect_mut(prefix, out);
        }
    }
}

/// FNV-1a over the little-endian bit patterns of every tensor, in order.
pub fn checksum<T: Real>(tensors: &[(String, &Tensor<T>)]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for (name, t) in tensors {
        name.bytes().for_each(&mut eat);
        for v in &t.data {
            v.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
        }
    }
    h
}
