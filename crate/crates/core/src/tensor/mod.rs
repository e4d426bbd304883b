//! Dense tensors with reverse-mode gradients.
//!
//! [`Tensor`] is a plain shape + row-major buffer; all math lives in free
//! kernels under [`ops`]. The same kernels back two execution routes: the
//! zero-overhead [`Eager`] route used for inference, and the recording
//! [`GradTape`] route used for training. Both implement the [`Ops`] trait so
//! model and loss code is written once and runs on either.
//!
//! Weights and activations are `f32` in production; the whole stack is
//! generic over [`Scalar`] so gradient checks run the identical code in
//! `f64` (see [`gradcheck`]).

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod ops;
mod tape;
mod trait_ops;

pub use gradcheck::finite_difference_check;
pub use tape::{GradTape, Gradients, ValueId};
pub use trait_ops::{Eager, Ops};

/// Element type of a [`Tensor`]: `f32` for training/inference, `f64` for
/// finite-difference gradient checks.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum<Self>
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn mins(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn maxs(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn mins(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Logistic sigmoid, shared by several activation kernels.
#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor(shape={:?}, data={:?})", self.shape, self.data)
        } else {
            write!(f, "Tensor(shape={:?}, len={})", self.shape, self.data.len())
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                context: "Tensor::new".into(),
                shape,
                reason: "rank must be >= 1 and every dim >= 1".into(),
            });
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::InvalidShape {
                context: "Tensor::new".into(),
                shape,
                reason: format!("shape wants {expect} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::ZERO; n],
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::ONE)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Elementwise Gaussian draw, `N(mean, std^2)`, from the given generator.
    pub fn gaussian(
        shape: impl Into<Vec<usize>>,
        mean: f64,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).expect("std must be finite and positive");
        let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data }
    }

    /// Elementwise uniform draw from `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let dist = Uniform::new(lo, hi);
        let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                context: "reshape".into(),
                shape,
                reason: format!("incompatible with {} elements", self.data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Convert elements to another scalar type (used to move nets between
    /// the f32 production path and the f64 gradient-check path).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly (no broadcasting).
    pub fn zip_map(&self, other: &Self, context: &str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Finiteness invariant, checked in debug/test builds after every kernel.
    #[inline]
    pub(crate) fn debug_assert_finite(&self, op: &str) {
        #[cfg(debug_assertions)]
        {
            debug_assert!(self.all_finite(), "{op}: non-finite element produced");
        }
        let _ = op;
    }

    /// Largest absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0f64, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(Vec::<usize>::new(), vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4, 2]).is_err());
    }

    #[test]
    fn gaussian_is_seed_deterministic() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::<f32>::gaussian(vec![4, 4], 0.0, 1.0, &mut a);
        let tb = Tensor::<f32>::gaussian(vec![4, 4], 0.0, 1.0, &mut b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn cast_round_trips_f32() {
        let t = Tensor::<f32>::new(vec![3], vec![0.25, -1.5, 3.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}
