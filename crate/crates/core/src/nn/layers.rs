use rand::Rng;

use super::{Module, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(out.shape(), data).expect("same shape")
}

/// Per-channel `y = scale · x + shift`, used in place of batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> ChannelAffine<T> {
    pub fn new(channels: usize, scale: T) -> Self {
        Self {
            scale: Tensor::filled(&[channels], scale),
            shift: Tensor::zeros(&[channels]),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, l) = x.dims3()?;
        if c != self.scale.len() {
            return Err(Error::Shape(format!(
                "affine expects {} channels, got {c}",
                self.scale.len()
            )));
        }
        Ok((b, c, l))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, l) = self.check(x)?;
        let mut y = x.clone();
        for (i, row) in y.data_mut().chunks_mut(l).enumerate().take(b * c) {
            let ch = i % c;
            let (s, t) = (self.scale.data()[ch], self.shift.data()[ch]);
            for v in row {
                *v = s * *v + t;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let (_, c, l) = self.check(x)?;
        let mut dx = dy.clone();
        for (i, (row, xrow)) in dx.data_mut().chunks_mut(l).zip(x.data().chunks(l)).enumerate() {
            let ch = i % c;
            let s = self.scale.data()[ch];
            let mut gs = T::zero();
            let mut gt = T::zero();
            for (g, &xv) in row.iter_mut().zip(xrow) {
                gs += *g * xv;
                gt += *g;
                *g *= s;
            }
            grad.scale.data_mut()[ch] += gs;
            grad.shift.data_mut()[ch] += gt;
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for ChannelAffine<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("scale".into(), &self.scale), ("shift".into(), &self.shift)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("scale".into(), &mut self.scale), ("shift".into(), &mut self.shift)]
    }
}

/// Dense layer on a single feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let n = x.len();
        self.weight
            .data()
            .chunks(n)
            .zip(self.bias.data())
            .map(|(row, &b)| row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + b)
            .collect()
    }

    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Self) -> Vec<T> {
        let n = x.len();
        let mut dx = vec![T::zero(); n];
        for (o, &g) in dy.iter().enumerate() {
            grad.bias.data_mut()[o] += g;
            let row = &self.weight.data()[o * n..(o + 1) * n];
            let grow = &mut grad.weight.data_mut()[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Mean over positions of a `[C, L]` (or `[1, C, L]`) tensor.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (b, c, l) = x.dims3()?;
    if b != 1 || l == 0 {
        return Err(Error::Shape(format!(
            "pooling expects one non-empty sample, got {:?}",
            x.shape()
        )));
    }
    let n = T::of_usize(l);
    Ok(x.data()
        .chunks(l)
        .take(c)
        .map(|row| row.iter().copied().sum::<T>() / n)
        .collect())
}

pub fn global_avg_pool_backward<T: Scalar>(shape: &[usize], dy: &[T]) -> Tensor<T> {
    let l = *shape.last().expect("non-empty shape");
    let n = T::of_usize(l);
    let data = dy.iter().flat_map(|&g| std::iter::repeat_n(g / n, l)).collect();
    Tensor::from_vec(shape, data).expect("pool shape")
}

/// Softmax cross-entropy of `logits` against `target`; returns loss and `∂/∂logits`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() + max - logits[target];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[target] -= T::one();
    (loss, grad)
}
