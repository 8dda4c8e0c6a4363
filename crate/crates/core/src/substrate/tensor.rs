use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4(pub [usize; 4]);

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one (h, w) plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
}

impl fmt::Debug for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(v: [usize; 4]) -> Self {
        Shape4(v)
    }
}

/// Dense row-major (n, c, h, w) array of doubles.
///
/// All arithmetic in the toolkit runs in double precision. Constructors
/// reject non-finite data.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape4>, value: f64) -> Self {
        let shape = shape.into();
        Tensor4 {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.0.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape}")));
        }
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    /// Skips validation; callers guarantee length and finiteness.
    pub(crate) fn from_raw(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor4 { shape, data }
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Shape4>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor4 { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Shape4>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous (c, h, w) block of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let per = self.shape.numel() / self.shape.n();
        &self.data[n * per..(n + 1) * per]
    }

    pub fn reshape(mut self, shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.data.len() {
            return Err(Error::shape("reshape", format!("{} -> {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when every element has the same bit pattern.
    pub fn bitwise_eq(&self, other: &Tensor4) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape("stack", format!("{} vs {}", first.shape, t.shape)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4::from_raw(Shape4::new(n, c, h, w), data))
    }

    /// Copies sample `n` out as a batch-of-one tensor.
    pub fn slice_sample(&self, n: usize) -> Tensor4 {
        let [_, c, h, w] = self.shape.0;
        Tensor4::from_raw(Shape4::new(1, c, h, w), self.sample(n).to_vec())
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor4{} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, " …")?;
        }
        Ok(())
    }
}
