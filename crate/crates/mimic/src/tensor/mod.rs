//! Dense f64 tensor engine with reverse-mode differentiation.
//!
//! Tensors are 4-axis NCHW arrays. Differentiable computations are recorded
//! on a [`Tape`] (one tape per forward pass); [`Tape::backward`] replays the
//! recorded operations in exact reverse order and accumulates gradients.
//! Everything is single-threaded and bit-deterministic.

mod adam;
mod gradcheck;
pub(crate) mod ops;
mod tape;

pub use adam::{adam_update, AdamState};
pub use gradcheck::finite_diff_grad;
pub use tape::{Op, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Shape of a 4-axis tensor: (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Shape of a scalar (all axes 1).
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// Single-image shape with batch 1.
    pub const fn image(c: usize, h: usize, w: usize) -> Self {
        Shape::new(1, c, h, w)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense f64 tensor with an optional gradient slot of the same shape.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape("numel", shape.numel(), data.len(), format!("Tensor::new with shape {shape}")));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()], grad: None }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.numel()], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value], grad: None }
    }

    /// Uniform random tensor in `[lo, hi)` drawn from `rng` in row-major order.
    pub fn rand_uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data, grad: None }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.shape.numel() {
            return Err(Error::shape("numel", self.shape.numel(), grad.len(), "Tensor::set_grad"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Flat index of element (n, c, y, x).
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    /// Channel plane (n, c) as a contiguous `h*w` slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape.hw();
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("numel", self.shape.numel(), other.shape.numel(), format!("zip of {} with {}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data, grad: None })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("numel", self.shape.numel(), other.shape.numel(), "max_abs_diff"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(Shape::image(1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_fn(Shape::new(1, 2, 2, 3), |_, c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at(0, 1, 1, 2), 112.0);
        assert_eq!(t.plane(0, 1)[5], 112.0);
    }

    #[test]
    fn rand_uniform_is_seed_deterministic() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::rand_uniform(Shape::image(1, 4, 4), -1.0, 1.0, &mut a);
        let tb = Tensor::rand_uniform(Shape::image(1, 4, 4), -1.0, 1.0, &mut b);
        assert_eq!(ta.data(), tb.data());
    }
}
