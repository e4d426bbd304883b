//! Single-source forward execution.
//!
//! Model and loss code is generic over [`Ops`], so the exact same call
//! sequence runs either eagerly (inference: no graph, no saved activations)
//! or on a [`GradTape`] (training). Both executors dispatch to the kernels in
//! [`ops`](super::ops), so the two routes cannot drift numerically.

use crate::error::Result;
use crate::tensor::{ops, GradTape, Scalar, Tensor, ValueId};

pub trait Ops<S: Scalar> {
    type Val: Clone;

    /// Introduce an input the gradient never flows back to.
    fn constant(&mut self, t: &Tensor<S>) -> Self::Val;

    /// Introduce a named parameter; `trainable` only matters on the tape.
    fn param(&mut self, name: &str, t: &Tensor<S>, trainable: bool) -> Self::Val;

    fn conv2d(
        &mut self,
        input: &Self::Val,
        kernel: &Self::Val,
        bias: Option<&Self::Val>,
        padding: usize,
    ) -> Result<Self::Val>;
    fn silu(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn sigmoid_shift(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn tanh_act(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn scale(&mut self, x: &Self::Val, factor: S) -> Result<Self::Val>;
    fn matmul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn reshape(&mut self, x: &Self::Val, shape: &[usize]) -> Result<Self::Val>;
    fn concat_channels(&mut self, xs: &[Self::Val]) -> Result<Self::Val>;
    fn pixel_shuffle(&mut self, x: &Self::Val, factor: usize) -> Result<Self::Val>;
    fn normalize_positions(&mut self, x: &Self::Val, eps: S) -> Result<Self::Val>;
    fn gram_batched(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn abs_mean(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn sq_mean(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn sum(&mut self, x: &Self::Val) -> Result<Self::Val>;

    /// Read the forward value behind a handle.
    fn tensor<'a>(&'a self, v: &'a Self::Val) -> &'a Tensor<S>;
}

/// Inference executor: values are plain tensors, nothing is recorded.
pub struct Eager;

impl<S: Scalar> Ops<S> for Eager {
    type Val = Tensor<S>;

    fn constant(&mut self, t: &Tensor<S>) -> Tensor<S> {
        t.clone()
    }

    fn param(&mut self, _name: &str, t: &Tensor<S>, _trainable: bool) -> Tensor<S> {
        t.clone()
    }

    fn conv2d(
        &mut self,
        input: &Tensor<S>,
        kernel: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        padding: usize,
    ) -> Result<Tensor<S>> {
        ops::conv2d(input, kernel, bias, padding)
    }

    fn silu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::silu(x))
    }

    fn sigmoid_shift(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::sigmoid_shift(x))
    }

    fn tanh_act(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::tanh_act(x))
    }

    fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        ops::add(a, b)
    }

    fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        ops::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        ops::mul(a, b)
    }

    fn scale(&mut self, x: &Tensor<S>, factor: S) -> Result<Tensor<S>> {
        Ok(ops::scale(x, factor))
    }

    fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        ops::matmul(a, b)
    }

    fn reshape(&mut self, x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        x.reshape(shape.to_vec())
    }

    fn concat_channels(&mut self, xs: &[Tensor<S>]) -> Result<Tensor<S>> {
        let refs: Vec<&Tensor<S>> = xs.iter().collect();
        ops::concat_channels(&refs)
    }

    fn pixel_shuffle(&mut self, x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
        ops::pixel_shuffle(x, factor)
    }

    fn normalize_positions(&mut self, x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        ops::normalize_positions(x, eps)
    }

    fn gram_batched(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::gram_batched(x)
    }

    fn abs_mean(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::abs_mean(x))
    }

    fn sq_mean(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::sq_mean(x))
    }

    fn sum(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::sum(x))
    }

    fn tensor<'a>(&'a self, v: &'a Tensor<S>) -> &'a Tensor<S> {
        v
    }
}

impl<S: Scalar> Ops<S> for GradTape<S> {
    type Val = ValueId;

    fn constant(&mut self, t: &Tensor<S>) -> ValueId {
        self.leaf(t.clone())
    }

    fn param(&mut self, name: &str, t: &Tensor<S>, trainable: bool) -> ValueId {
        if trainable {
            self.trainable_leaf(name, t.clone())
        } else {
            self.leaf(t.clone())
        }
    }

    fn conv2d(
        &mut self,
        input: &ValueId,
        kernel: &ValueId,
        bias: Option<&ValueId>,
        padding: usize,
    ) -> Result<ValueId> {
        GradTape::conv2d(self, *input, *kernel, bias.copied(), padding)
    }

    fn silu(&mut self, x: &ValueId) -> Result<ValueId> {
        GradTape::silu(self, *x)
    }

    fn sigmoid_shift(&mut self, x: &ValueId) -> Result<ValueId> {
        GradTape::sigmoid_shift(self, *x)
    }

    fn tanh_act(&mut self, x: &ValueId) -> Result<ValueId> {
        GradTape::tanh_act(self, *x)
    }

    fn add(&mut self, a: &ValueId, b: &ValueId) -> Result<ValueId> {
        GradTape::add(self, *a, *b)
    }

    fn sub(&mut self, a: &ValueId, b: &ValueId) -> Result<ValueId> {
        GradTape::sub(self, *a, *b)
    }

    fn mul(&mut self, a: &ValueId, b: &ValueId) -> Result<ValueId> {
        GradTape::mul(self, *a, *b)
    }

    fn scale(&mut self, x: &ValueId, factor: S) -> Result<ValueId> {
        GradTape::scale(self, *x, factor)
    }

    fn matmul(&mut self, a: &ValueId, b: &ValueId) -> Result<ValueId> {
        GradTape::matmul(self, *a, *b)
    }

    fn reshape(&mut self, x: &ValueId, shape: &[usize]) -> Result<ValueId> {
        GradTape::reshape(self, *x, shape)
    }

    fn concat_channels(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        GradTape::concat_channels(self, xs)
    }

    fn pixel_shuffle(&mut self, x: &ValueId, factor: usize) -> Result<ValueId> {
        GradTape::pixel_shuffle(self, *x, factor)
    }

    fn normalize_positions(&mut self, x: &ValueId, eps: S) -> Result<ValueId> {
        GradTape::normalize_positions(self, *x, eps)
    }

    fn gram_batched(&mut self, x: &ValueId) -> Result<ValueId> {
        GradTape::gram_batched(self, *x)
    }

    fn abs_mean(&mut self, x: &ValueId) -> Result<ValueId> {
        GradTape::abs_mean(self, *x)
    }

    fn sq_mean(&mut self, x: &ValueId) -> Result<ValueId> {
        GradTape::sq_mean(self, *x)
    }

    fn sum(&mut self, x: &ValueId) -> Result<ValueId> {
        GradTape::sum(self, *x)
    }

    fn tensor<'a>(&'a self, v: &'a ValueId) -> &'a Tensor<S> {
        self.value(*v)
    }
}
