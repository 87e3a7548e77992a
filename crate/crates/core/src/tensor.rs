//! Dense 3-D arrays (channels × height × width) and seeded Gaussian noise.
//!
//! Storage is a flat `Vec<f64>` in channel-major, then row-major order:
//! entry `(c, y, x)` lives at `(c * height + y) * width + x`. Checkpoints
//! rely on this layout, so it must not change.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial size of one channel.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor3 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Wraps `data`, which must have exactly `shape.len()` finite entries.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim("Tensor3::from_vec", shape.len(), data.len()));
        }
        if shape.is_empty() {
            return Err(Error::param("shape", "all extents must be positive"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param("data", format!("entry {i} is not finite")));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor3 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.channels && y < self.shape.height && x < self.shape.width);
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Slice holding channel `c`.
    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn inner_product(&self, other: &Tensor3) -> Result<f64> {
        inner_product(self, other)
    }

    pub fn sq_norm(&self) -> f64 {
        sq_norm(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Population standard deviation of the entries.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let v = self.data.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / self.len() as f64;
        v.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &Tensor3) -> Result<()> {
        self.check_same(other, "Tensor3::add_scaled")?;
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Tensor3 {
        let mut t = self.clone();
        t.scale(a);
        t
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        let mut t = self.clone();
        t.add_scaled(-1.0, other)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        let mut t = self.clone();
        t.add_scaled(1.0, other)?;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> Result<f64> {
        self.check_same(other, "Tensor3::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn check_same(&self, other: &Tensor3, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(context, self.shape, other.shape));
        }
        Ok(())
    }
}

/// Σ over all entries of `a · b`.
pub fn inner_product(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    a.check_same(b, "inner_product")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

pub fn sq_norm(a: &Tensor3) -> f64 {
    a.data.iter().map(|x| x * x).sum()
}

/// Seeded ChaCha8 stream. Independent streams for parallel consumers are
/// derived as `master ^ index` (see [`SeededRng::substream`]).
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for consumer `index` of a run seeded with `master`.
    pub fn substream(master: u64, index: u64) -> Self {
        Self::new(master ^ index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the underlying stream, in 32-bit words.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Rebuilds a stream at a saved position.
    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut r = Self::new(seed);
        r.rng.set_word_pos(word_pos);
        r
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.rng)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Tensor of i.i.d. `N(0, sigma²)` entries.
pub fn gaussian_noise(shape: Shape, sigma: f64, rng: &mut SeededRng) -> Result<Tensor3> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
    }
    if shape.is_empty() {
        return Err(Error::param("shape", "all extents must be positive"));
    }
    let data = (0..shape.len())
        .map(|_| sigma * rng.standard_normal())
        .collect();
    Ok(Tensor3 { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor3 {
        Tensor3::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        let s = Shape::new(1, 2, 2);
        let ones = Tensor3::filled(s, 1.0);
        assert_eq!(inner_product(&ones, &ones).unwrap(), 4.0);
        let a = t(s, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(inner_product(&a, &Tensor3::zeros(s)).unwrap(), 0.0);
        let b = t(s, &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(inner_product(&a, &b).unwrap(), 20.0);
    }

    #[test]
    fn inner_product_rejects_mismatched_shapes() {
        let a = Tensor3::zeros(Shape::new(1, 2, 2));
        let b = Tensor3::zeros(Shape::new(1, 4, 1));
        assert!(matches!(inner_product(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sq_norm_examples() {
        assert_eq!(sq_norm(&Tensor3::zeros(Shape::new(2, 3, 3))), 0.0);
        let a = t(Shape::new(1, 1, 2), &[3.0, 4.0]);
        assert_eq!(sq_norm(&a), 25.0);
        assert_eq!(sq_norm(&a.scaled(-3.0)), 9.0 * 25.0);
    }

    #[test]
    fn from_vec_validates() {
        assert!(Tensor3::from_vec(Shape::new(1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor3::from_vec(Shape::new(1, 1, 1), vec![f64::NAN]).is_err());
        assert!(Tensor3::from_vec(Shape::new(0, 1, 1), vec![]).is_err());
    }

    #[test]
    fn layout_is_channel_major() {
        let s = Shape::new(2, 2, 3);
        let a = Tensor3::from_fn(s, |c, y, x| (100 * c + 10 * y + x) as f64);
        assert_eq!(a.data()[0..3], [0.0, 1.0, 2.0]);
        assert_eq!(a.data()[3], 10.0);
        assert_eq!(a.data()[6], 100.0);
        assert_eq!(a.get(1, 1, 2), 112.0);
    }

    #[test]
    fn noise_rejects_bad_sigma() {
        let mut rng = SeededRng::new(1);
        for s in [0.0, -1.0, f64::NAN] {
            assert!(gaussian_noise(Shape::new(1, 2, 2), s, &mut rng).is_err());
        }
    }

    #[test]
    fn noise_degenerate_variance() {
        let mut rng = SeededRng::new(7);
        let z = gaussian_noise(Shape::new(1, 32, 32), 1e-12, &mut rng).unwrap();
        assert!(z.max_abs() < 1e-9);
    }

    #[test]
    fn noise_moments_match_standard_normal() {
        let mut rng = SeededRng::new(2024);
        let z = gaussian_noise(Shape::new(1, 1000, 1000), 1.0, &mut rng).unwrap();
        let mean = z.mean();
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn noise_is_reproducible() {
        let s = Shape::new(3, 5, 4);
        let a = gaussian_noise(s, 0.5, &mut SeededRng::new(99)).unwrap();
        let b = gaussian_noise(s, 0.5, &mut SeededRng::new(99)).unwrap();
        let bits = |t: &Tensor3| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = gaussian_noise(s, 0.5, &mut SeededRng::new(100)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn rng_restore_resumes_stream() {
        let mut a = SeededRng::substream(42, 3);
        assert_eq!(a.seed(), 42 ^ 3);
        for _ in 0..17 {
            a.standard_normal();
        }
        let mut b = SeededRng::restore(a.seed(), a.word_pos());
        for _ in 0..10 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    fn vec3(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        let v = || proptest::collection::vec(-10.0f64..10.0, n);
        (v(), v(), v())
    }

    proptest! {
        #[test]
        fn inner_product_symmetric_bilinear((a, b, c) in vec3(12), k in -5.0f64..5.0) {
            let s = Shape::new(3, 2, 2);
            let (a, b, c) = (t(s, &a), t(s, &b), t(s, &c));
            let ab = inner_product(&a, &b).unwrap();
            let ba = inner_product(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));

            let mut lhs_arg = a.scaled(k);
            lhs_arg.add_scaled(1.0, &c).unwrap();
            let lhs = inner_product(&lhs_arg, &b).unwrap();
            let rhs = k * ab + inner_product(&c, &b).unwrap();
            let scale = 1.0 + (k * ab).abs() + inner_product(&c, &b).unwrap().abs();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);

            prop_assert_eq!(sq_norm(&a), inner_product(&a, &a).unwrap());
        }
    }
}
