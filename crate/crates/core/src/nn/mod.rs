//! Small deterministic numerical core for the fixed detector graph.
//!
//! Every layer exposes a cached forward pass and an explicit backward pass that
//! accumulates into a gradient container of the layer's own type, so parameters
//! and gradient slots always share names and shapes.

pub mod blocks;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use blocks::{BasicBlock, DilatedBlock};
pub use conv::Conv1d;
pub use gradcheck::{grad_check, rel_err};
pub use layers::{ChannelAffine, Linear};

/// Dense row-major tensor with up to three axes (batch × channel × position).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.len() > 3 {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform values in `[-bound, bound)`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as `[batch, channels, positions]`; 2-D tensors get batch 1.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, l] => Ok((b, c, l)),
            [c, l] => Ok((1, c, l)),
            _ => Err(Error::Shape(format!("expected 2 or 3 axes, got {:?}", self.shape))),
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(T::zero());
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Named parameter access for a layer or a composite of layers.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    /// Copy of `self` with every parameter zeroed, used as a gradient slot.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        out.zero_params();
        out
    }

    fn zero_params(&mut self) {
        for (_, p) in self.params_mut() {
            p.fill_zero();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All parameters flattened in declaration order.
    fn flat_params(&self) -> Vec<T> {
        self.params().into_iter().flat_map(|(_, p)| p.data().to_vec()).collect()
    }

    fn set_flat_params(&mut self, values: &[T]) {
        let mut it = values.iter();
        for (_, p) in self.params_mut() {
            for v in p.data_mut() {
                *v = *it.next().expect("flat parameter vector too short");
            }
        }
    }

    /// Accumulate another container of the same structure into this one.
    fn accumulate(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let theirs = other.params();
        for ((_, a), (_, b)) in self.params_mut().into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a Tensor<T>)>,
) -> impl Iterator<Item = (String, &'a Tensor<T>)> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor<T>)>,
) -> impl Iterator<Item = (String, &'a mut Tensor<T>)> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// Plain SGD: `θ ← θ − lr · ∇θ`.
pub fn sgd_step<T: Scalar, M: Module<T>>(params: &mut M, grads: &M, lr: T) -> Result<()> {
    let grads = grads.params();
    let mut params = params.params_mut();
    if grads.len() != params.len() {
        return Err(Error::Shape("parameter and gradient containers differ".into()));
    }
    for ((name, p), (_, g)) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
