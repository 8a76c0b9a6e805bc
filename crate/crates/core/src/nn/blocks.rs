use rand::Rng;

use super::layers::{relu, relu_backward};
use super::{prefixed, prefixed_mut, ChannelAffine, Conv1d, Module, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initial value of the residual-branch scale in [`BasicBlock`].
pub const RESIDUAL_SCALE_INIT: f64 = 0.25;

/// Two 3-tap convolutions with a residual shortcut, ResNet style.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock<T> {
    pub conv1: Conv1d<T>,
    pub conv2: Conv1d<T>,
    pub scale: ChannelAffine<T>,
    /// 1-tap projection when the stride or channel count changes.
    pub shortcut: Option<Conv1d<T>>,
}

#[derive(Debug, Clone)]
pub struct BasicCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    h2: Tensor<T>,
    out: Tensor<T>,
}

impl<T> BasicCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| {
            let mut c = Conv1d::zeros(cin, cout, 1, stride, 1, 0);
            c.init_uniform(1.0, rng);
            c
        });
        Self {
            conv1: Conv1d::same(cin, cout, 3, stride, 1, rng),
            conv2: Conv1d::same(cout, cout, 3, 1, 1, rng),
            scale: ChannelAffine::new(cout, T::of(RESIDUAL_SCALE_INIT)),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<BasicCache<T>> {
        let a1 = relu(&self.conv1.forward(x)?);
        let h2 = self.conv2.forward(&a1)?;
        let mut sum = self.scale.forward(&h2)?;
        match &self.shortcut {
            Some(sc) => sum.add_assign(&sc.forward(x)?)?,
            None => sum.add_assign(x)?,
        }
        Ok(BasicCache {
            x: x.clone(),
            a1,
            h2,
            out: relu(&sum),
        })
    }

    pub fn backward(&self, cache: &BasicCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let dsum = relu_backward(&cache.out, dy);
        let dh2 = self.scale.backward(&cache.h2, &dsum, &mut grad.scale)?;
        let da1 = self.conv2.backward(&cache.a1, &dh2, &mut grad.conv2)?;
        let dh1 = relu_backward(&cache.a1, &da1);
        let mut dx = self.conv1.backward(&cache.x, &dh1, &mut grad.conv1)?;
        match (&self.shortcut, grad.shortcut.as_mut()) {
            (Some(sc), Some(gsc)) => dx.add_assign(&sc.backward(&cache.x, &dsum, gsc)?)?,
            (None, None) => dx.add_assign(&dsum)?,
            _ => return Err(Error::Shape("gradient container lacks shortcut slot".into())),
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<_> = prefixed("conv1", self.conv1.params())
            .chain(prefixed("conv2", self.conv2.params()))
            .chain(prefixed("scale", self.scale.params()))
            .collect();
        if let Some(sc) = &self.shortcut {
            out.extend(prefixed("shortcut", sc.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<_> = prefixed_mut("conv1", self.conv1.params_mut())
            .chain(prefixed_mut("conv2", self.conv2.params_mut()))
            .chain(prefixed_mut("scale", self.scale.params_mut()))
            .collect();
        if let Some(sc) = &mut self.shortcut {
            out.extend(prefixed_mut("shortcut", sc.params_mut()));
        }
        out
    }
}

/// Residual dilation block: channel reduction, dilated 3-tap convolution,
/// channel recovery, plus an identity shortcut. Output shape equals input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedBlock<T> {
    pub reduce: Conv1d<T>,
    pub dilated: Conv1d<T>,
    pub recover: Conv1d<T>,
}

#[derive(Debug, Clone)]
pub struct DilatedCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    out: Tensor<T>,
}

impl<T> DilatedCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }
}

impl<T: Scalar> DilatedBlock<T> {
    pub fn new<R: Rng>(channels: usize, reduced: usize, rate: usize, rng: &mut R) -> Self {
        let mut recover = Conv1d::zeros(reduced, channels, 1, 1, 1, 0);
        recover.init_uniform(1.0, rng);
        Self {
            reduce: Conv1d::same(channels, reduced, 1, 1, 1, rng),
            dilated: Conv1d::same(reduced, reduced, 3, 1, rate, rng),
            recover,
        }
    }

    pub fn rate(&self) -> usize {
        self.dilated.dilation
    }

    /// Positions one block can see: `1 + rate · (kernel − 1)`.
    pub fn receptive_len(&self) -> usize {
        1 + self.dilated.dilation * (self.dilated.kernel() - 1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<DilatedCache<T>> {
        let (_, c, _) = x.dims3()?;
        if c != self.recover.out_channels() {
            return Err(Error::Shape(format!(
                "dilated block shortcut expects {} channels, got {c}",
                self.recover.out_channels()
            )));
        }
        let a1 = relu(&self.reduce.forward(x)?);
        let a2 = relu(&self.dilated.forward(&a1)?);
        let mut out = self.recover.forward(&a2)?;
        out.add_assign(x)?;
        Ok(DilatedCache {
            x: x.clone(),
            a1,
            a2,
            out,
        })
    }

    pub fn backward(&self, cache: &DilatedCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let da2 = self.recover.backward(&cache.a2, dy, &mut grad.recover)?;
        let dh2 = relu_backward(&cache.a2, &da2);
        let da1 = self.dilated.backward(&cache.a1, &dh2, &mut grad.dilated)?;
        let dh1 = relu_backward(&cache.a1, &da1);
        let mut dx = self.reduce.backward(&cache.x, &dh1, &mut grad.reduce)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for DilatedBlock<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        prefixed("reduce", self.reduce.params())
            .chain(prefixed("dilated", self.dilated.params()))
            .chain(prefixed("recover", self.recover.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        prefixed_mut("reduce", self.reduce.params_mut())
            .chain(prefixed_mut("dilated", self.dilated.params_mut()))
            .chain(prefixed_mut("recover", self.recover.params_mut()))
            .collect()
    }
}

/// Receptive length of stacked 3-tap dilated convolutions: `1 + 2 · Σ rates`.
pub fn stacked_receptive_len(blocks: &[DilatedBlock<impl Scalar>]) -> usize {
    1 + blocks.iter().map(|b| b.receptive_len() - 1).sum::<usize>()
}
