//! Reverse-mode gradient tape.
//!
//! Operations record one node each, in execution order, holding the input
//! value ids plus whatever the backward pass needs (the forward values double
//! as the saved activations). [`GradTape::backward`] walks the nodes once in
//! reverse, accumulating gradients additively at fan-out points, and only
//! descends into subgraphs that can reach a trainable leaf.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId {
    tape: u64,
    index: u32,
}

#[derive(Debug)]
enum Node<S: Scalar> {
    Leaf,
    Conv2d {
        input: u32,
        kernel: u32,
        bias: Option<u32>,
        padding: usize,
    },
    Silu {
        input: u32,
    },
    SigmoidShift {
        input: u32,
    },
    Tanh {
        input: u32,
    },
    Add {
        a: u32,
        b: u32,
    },
    Sub {
        a: u32,
        b: u32,
    },
    Mul {
        a: u32,
        b: u32,
    },
    Scale {
        input: u32,
        factor: S,
    },
    Matmul {
        a: u32,
        b: u32,
    },
    Reshape {
        input: u32,
    },
    ConcatChannels {
        inputs: Vec<u32>,
    },
    PixelShuffle {
        input: u32,
        factor: usize,
    },
    NormalizePositions {
        input: u32,
        eps: S,
    },
    GramBatched {
        input: u32,
    },
    AbsMean {
        input: u32,
    },
    SqMean {
        input: u32,
    },
    Sum {
        input: u32,
    },
}

/// Wengert tape: recorded op nodes plus their forward values.
pub struct GradTape<S: Scalar> {
    id: u64,
    values: Vec<Tensor<S>>,
    nodes: Vec<Node<S>>,
    trainable: Vec<bool>,
    params: Vec<(String, ValueId)>,
}

impl<S: Scalar> Default for GradTape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GradTape<S> {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            nodes: Vec::new(),
            trainable: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Record a constant input (no gradient will flow back to it).
    pub fn leaf(&mut self, t: Tensor<S>) -> ValueId {
        self.push(t, Node::Leaf, false)
    }

    /// Record a named trainable parameter.
    pub fn trainable_leaf(&mut self, name: &str, t: Tensor<S>) -> ValueId {
        let id = self.push(t, Node::Leaf, true);
        self.params.push((name.to_string(), id));
        id
    }

    /// Named trainable leaves in registration order.
    pub fn params(&self) -> &[(String, ValueId)] {
        &self.params
    }

    /// Forward value of a recorded id.
    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        assert_eq!(id.tape, self.id, "value from a different tape");
        &self.values[id.index as usize]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, t: Tensor<S>, node: Node<S>, trainable: bool) -> ValueId {
        let index = u32::try_from(self.values.len()).expect("tape too long");
        self.values.push(t);
        self.nodes.push(node);
        self.trainable.push(trainable);
        ValueId {
            tape: self.id,
            index,
        }
    }

    fn check(&self, id: ValueId) -> Result<u32> {
        if id.tape != self.id {
            return Err(Error::ForeignValue);
        }
        Ok(id.index)
    }

    fn get(&self, index: u32) -> &Tensor<S> {
        &self.values[index as usize]
    }

    // — recorded operations —

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        padding: usize,
    ) -> Result<ValueId> {
        let (xi, ki) = (self.check(input)?, self.check(kernel)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        let out = ops::conv2d(
            self.get(xi),
            self.get(ki),
            bi.map(|i| self.get(i)),
            padding,
        )?;
        Ok(self.push(
            out,
            Node::Conv2d {
                input: xi,
                kernel: ki,
                bias: bi,
                padding,
            },
            false,
        ))
    }

    pub fn silu(&mut self, x: ValueId) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::silu(self.get(xi));
        Ok(self.push(out, Node::Silu { input: xi }, false))
    }

    pub fn sigmoid_shift(&mut self, x: ValueId) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::sigmoid_shift(self.get(xi));
        Ok(self.push(out, Node::SigmoidShift { input: xi }, false))
    }

    pub fn tanh_act(&mut self, x: ValueId) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::tanh_act(self.get(xi));
        Ok(self.push(out, Node::Tanh { input: xi }, false))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = ops::add(self.get(ai), self.get(bi))?;
        Ok(self.push(out, Node::Add { a: ai, b: bi }, false))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = ops::sub(self.get(ai), self.get(bi))?;
        Ok(self.push(out, Node::Sub { a: ai, b: bi }, false))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = ops::mul(self.get(ai), self.get(bi))?;
        Ok(self.push(out, Node::Mul { a: ai, b: bi }, false))
    }

    pub fn scale(&mut self, x: ValueId, factor: S) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::scale(self.get(xi), factor);
        Ok(self.push(out, Node::Scale { input: xi, factor }, false))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = ops::matmul(self.get(ai), self.get(bi))?;
        Ok(self.push(out, Node::Matmul { a: ai, b: bi }, false))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = self.get(xi).reshape(shape.to_vec())?;
        Ok(self.push(out, Node::Reshape { input: xi }, false))
    }

    pub fn concat_channels(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let idx: Vec<u32> = xs
            .iter()
            .map(|&x| self.check(x))
            .collect::<Result<Vec<_>>>()?;
        let tensors: Vec<&Tensor<S>> = idx.iter().map(|&i| self.get(i)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(out, Node::ConcatChannels { inputs: idx }, false))
    }

    pub fn pixel_shuffle(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::pixel_shuffle(self.get(xi), factor)?;
        Ok(self.push(out, Node::PixelShuffle { input: xi, factor }, false))
    }

    pub fn normalize_positions(&mut self, x: ValueId, eps: S) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::normalize_positions(self.get(xi), eps)?;
        Ok(self.push(out, Node::NormalizePositions { input: xi, eps }, false))
    }

    pub fn gram_batched(&mut self, x: ValueId) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::gram_batched(self.get(xi))?;
        Ok(self.push(out, Node::GramBatched { input: xi }, false))
    }

    pub fn abs_mean(&mut self, x: ValueId) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::abs_mean(self.get(xi));
        Ok(self.push(out, Node::AbsMean { input: xi }, false))
    }

    pub fn sq_mean(&mut self, x: ValueId) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::sq_mean(self.get(xi));
        Ok(self.push(out, Node::SqMean { input: xi }, false))
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let xi = self.check(x)?;
        let out = ops::sum(self.get(xi));
        Ok(self.push(out, Node::Sum { input: xi }, false))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every value
    /// that can reach a trainable leaf; frozen leaves get no entry.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>> {
        let loss_idx = self.check(loss)? as usize;
        if self.values[loss_idx].len() != 1 {
            return Err(Error::LossNotScalar {
                shape: self.values[loss_idx].shape().to_vec(),
            });
        }

        // A value needs a gradient iff a trainable leaf is among its ancestors.
        let mut needs = vec![false; self.values.len()];
        for i in 0..self.nodes.len() {
            needs[i] = match &self.nodes[i] {
                Node::Leaf => self.trainable[i],
                node => {
                    let mut any = false;
                    node.visit_inputs(|j| any |= needs[j as usize]);
                    any
                }
            };
        }

        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.values.len()];
        grads[loss_idx] = Some(Tensor::scalar(S::ONE));

        for i in (0..=loss_idx).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &needs, &mut grads);
            if matches!(self.nodes[i], Node::Leaf) {
                grads[i] = Some(g); // keep leaf gradients for the caller
            }
        }

        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }

    /// Gradients of the named trainable parameters, keyed by name.
    pub fn param_gradients(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    fn propagate(
        &self,
        index: usize,
        g: &Tensor<S>,
        needs: &[bool],
        grads: &mut [Option<Tensor<S>>],
    ) {
        let mut acc = |idx: u32, delta: Tensor<S>| {
            let slot = &mut grads[idx as usize];
            match slot {
                None => *slot = Some(delta),
                Some(t) => t.add_scaled(&delta, S::ONE),
            }
        };

        match &self.nodes[index] {
            Node::Leaf => {}
            Node::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                if needs[*input as usize] {
                    let gx = ops::conv2d_grad_input(
                        g,
                        self.get(*kernel),
                        *padding,
                        self.get(*input).shape(),
                    );
                    acc(*input, gx);
                }
                if needs[*kernel as usize] {
                    let gk = ops::conv2d_grad_kernel(
                        g,
                        self.get(*input),
                        self.get(*kernel).shape(),
                        *padding,
                    );
                    acc(*kernel, gk);
                }
                if let Some(b) = bias {
                    if needs[*b as usize] {
                        acc(*b, ops::conv2d_grad_bias(g));
                    }
                }
            }
            Node::Silu { input } => {
                if needs[*input as usize] {
                    acc(*input, ops::silu_grad(self.get(*input), g));
                }
            }
            Node::SigmoidShift { input } => {
                if needs[*input as usize] {
                    acc(*input, ops::sigmoid_shift_grad(self.get(*input), g));
                }
            }
            Node::Tanh { input } => {
                if needs[*input as usize] {
                    acc(*input, ops::tanh_grad(self.get(*input), g));
                }
            }
            Node::Add { a, b } => {
                if needs[*a as usize] {
                    acc(*a, g.clone());
                }
                if needs[*b as usize] {
                    acc(*b, g.clone());
                }
            }
            Node::Sub { a, b } => {
                if needs[*a as usize] {
                    acc(*a, g.clone());
                }
                if needs[*b as usize] {
                    acc(*b, ops::scale(g, -S::ONE));
                }
            }
            Node::Mul { a, b } => {
                if needs[*a as usize] {
                    acc(*a, ops::mul(g, self.get(*b)).expect("mul grad"));
                }
                if needs[*b as usize] {
                    acc(*b, ops::mul(g, self.get(*a)).expect("mul grad"));
                }
            }
            Node::Scale { input, factor } => {
                if needs[*input as usize] {
                    acc(*input, ops::scale(g, *factor));
                }
            }
            Node::Matmul { a, b } => {
                if needs[*a as usize] {
                    acc(*a, ops::matmul_grad_a(g, self.get(*b)));
                }
                if needs[*b as usize] {
                    acc(*b, ops::matmul_grad_b(g, self.get(*a)));
                }
            }
            Node::Reshape { input } => {
                if needs[*input as usize] {
                    let back = g
                        .reshape(self.get(*input).shape().to_vec())
                        .expect("reshape grad");
                    acc(*input, back);
                }
            }
            Node::ConcatChannels { inputs } => {
                let sizes: Vec<usize> = inputs.iter().map(|&i| self.get(i).shape()[1]).collect();
                let parts = ops::split_channels(g, &sizes);
                for (&i, part) in inputs.iter().zip(parts) {
                    if needs[i as usize] {
                        acc(i, part);
                    }
                }
            }
            Node::PixelShuffle { input, factor } => {
                if needs[*input as usize] {
                    acc(*input, ops::pixel_unshuffle(g, *factor).expect("shuffle grad"));
                }
            }
            Node::NormalizePositions { input, eps } => {
                if needs[*input as usize] {
                    acc(*input, ops::normalize_positions_grad(self.get(*input), g, *eps));
                }
            }
            Node::GramBatched { input } => {
                if needs[*input as usize] {
                    acc(*input, ops::gram_batched_grad(self.get(*input), g));
                }
            }
            Node::AbsMean { input } => {
                if needs[*input as usize] {
                    acc(*input, ops::abs_mean_grad(self.get(*input), g));
                }
            }
            Node::SqMean { input } => {
                if needs[*input as usize] {
                    acc(*input, ops::sq_mean_grad(self.get(*input), g));
                }
            }
            Node::Sum { input } => {
                if needs[*input as usize] {
                    acc(*input, ops::sum_grad(self.get(*input), g));
                }
            }
        }
    }
}

impl<S: Scalar> Node<S> {
    fn visit_inputs(&self, mut f: impl FnMut(u32)) {
        match self {
            Node::Leaf => {}
            Node::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                f(*input);
                f(*kernel);
                if let Some(b) = bias {
                    f(*b);
                }
            }
            Node::Silu { input }
            | Node::SigmoidShift { input }
            | Node::Tanh { input }
            | Node::Scale { input, .. }
            | Node::Reshape { input }
            | Node::PixelShuffle { input, .. }
            | Node::NormalizePositions { input, .. }
            | Node::GramBatched { input }
            | Node::AbsMean { input }
            | Node::SqMean { input }
            | Node::Sum { input } => f(*input),
            Node::Add { a, b } | Node::Sub { a, b } | Node::Mul { a, b } | Node::Matmul { a, b } => {
                f(*a);
                f(*b);
            }
            Node::ConcatChannels { inputs } => {
                for &i in inputs {
                    f(i);
                }
            }
        }
    }
}

/// Result of a backward sweep: per-value gradients, indexable by [`ValueId`].
pub struct Gradients<S: Scalar> {
    tape_id: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        assert_eq!(id.tape, self.tape_id, "gradient from a different tape");
        self.grads[id.index as usize].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor<S>> {
        assert_eq!(id.tape, self.tape_id, "gradient from a different tape");
        self.grads[id.index as usize].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.trainable_leaf("x", Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(vec![3]));
    }

    #[test]
    fn quadratic_gradient_is_2x() {
        let mut tape = GradTape::<f64>::new();
        let data = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let x = tape.trainable_leaf("x", data.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let want = data.map(|v| 2.0 * v);
        assert!(grads.get(x).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fanout_accumulates() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.trainable_leaf("x", Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn frozen_leaf_gets_no_entry() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.trainable_leaf("x", Tensor::scalar(1.0));
        let frozen = tape.leaf(Tensor::scalar(4.0));
        let y = tape.mul(x, frozen).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.trainable_leaf("x", Tensor::ones(vec![2]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::LossNotScalar { .. })
        ));
    }

    #[test]
    fn foreign_value_is_error() {
        let mut a = GradTape::<f64>::new();
        let mut b = GradTape::<f64>::new();
        let xa = a.leaf(Tensor::scalar(1.0));
        let xb = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.add(xa, xb), Err(Error::ForeignValue)));
    }

    #[test]
    fn named_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = GradTape::<f64>::new();
        let w = tape.trainable_leaf("w", Tensor::gaussian(vec![2, 2], 0.0, 1.0, &mut rng));
        let x = tape.leaf(Tensor::gaussian(vec![2, 2], 0.0, 1.0, &mut rng));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sq_mean(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let named = tape.param_gradients(&grads);
        assert_eq!(named.len(), 1);
        assert!(named.contains_key("w"));
    }
}
