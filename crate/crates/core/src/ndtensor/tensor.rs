use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Storage element of a [`Tensor4`].
///
/// Training runs in `f32`; the gradient checks run the very same kernels in
/// `f64`. Kernels always accumulate in `f64` and round once on store.
pub trait Scalar: Copy + Default + PartialEq + PartialOrd + Send + Sync + fmt::Debug + 'static {
    /// Largest representable value strictly below 1.
    const BELOW_ONE: f64;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const BELOW_ONE: f64 = 1.0 - f32::EPSILON as f64 / 2.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Extents of a rank-4 tensor in batch × height × width × channels order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    /// A `1×1×1×len` shape, used for per-channel vectors and scalars.
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, 1, 1, len)
    }

    pub const fn scalar() -> Self {
        Shape::vector(1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub const fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    #[inline(always)]
    pub const fn offset(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.h, self.w, self.c)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense rank-4 array, row-major in batch, height, width, channel order.
#[derive(Clone, PartialEq)]
pub struct Tensor4<E = f32> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Scalar> Tensor4<E> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor4 {
            shape,
            data: vec![E::default(); shape.len()],
        }
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![E::from_f64(v); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} needs {} elements, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(E::from_f64(f(n, y, x, c)));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor4::filled(Shape::scalar(), v)
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor4 {
            shape: Shape::vector(values.len()),
            data: values.iter().map(|&v| E::from_f64(v)).collect(),
        }
    }

    /// Samples every element from N(mean, std²).
    pub fn random_normal<R: Rng + ?Sized>(shape: Shape, mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("finite, non-negative std");
        let data = (0..shape.len()).map(|_| E::from_f64(dist.sample(rng))).collect();
        Tensor4 { shape, data }
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| E::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> E {
        self.data[self.shape.offset(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: E) {
        let i = self.shape.offset(n, y, x, c);
        self.data[i] = v;
    }

    /// Reinterprets the same elements under a new shape of equal size.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor4::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| E::from_f64(f(v.to_f64()))).collect(),
        }
    }

    pub fn cast<F: Scalar>(&self) -> Tensor4<F> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", format!("{} vs {}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = E::from_f64(a.to_f64() + b.to_f64());
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = E::default());
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len().max(1) as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }

    /// `Σ self ⊙ other`, accumulated in 64 bits.
    pub fn dot(&self, other: &Tensor4<E>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum())
    }

    /// Spatial window `[top, top+h) × [left, left+w)` of every batch item.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if top + h > s.h || left + w > s.w {
            return Err(Error::shape(
                "crop",
                format!("window {h}×{w} at ({top},{left}) exceeds {s}"),
            ));
        }
        let out_shape = Shape::new(s.n, h, w, s.c);
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            for y in top..top + h {
                let start = s.offset(n, y, left, 0);
                data.extend_from_slice(&self.data[start..start + w * s.c]);
            }
        }
        Ok(Tensor4 { shape: out_shape, data })
    }

    /// Left-right mirror image.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let src = s.offset(n, y, x, 0);
                    let dst = s.offset(n, y, s.w - 1 - x, 0);
                    out.data[dst..dst + s.c].copy_from_slice(&self.data[src..src + s.c]);
                }
            }
        }
        out
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor4<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

impl<E: Scalar> fmt::Debug for Tensor4<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor4({}, [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "])")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::<f32>::from_vec(Shape::new(1, 2, 2, 1), vec![0.0; 3]).is_err());
        let t = Tensor4::<f32>::from_vec(Shape::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 1, 0, 0), 3.0);
    }

    #[test]
    fn crop_and_flip() {
        let t = Tensor4::<f32>::from_fn(Shape::new(1, 3, 3, 1), |_, y, x, _| (y * 3 + x) as f64);
        let c = t.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let f = t.flip_horizontal();
        assert_eq!(f.at(0, 0, 0, 0), 2.0);
        assert!(f.flip_horizontal().bit_eq(&t));
        assert!(t.crop(2, 2, 2, 2).is_err());
    }
}
