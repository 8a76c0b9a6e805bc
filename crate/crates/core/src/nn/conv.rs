use rand::Rng;

use super::{Module, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 1D cross-correlation with stride, dilation and symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    /// `[out_channels, in_channels, kernel]`
    pub weight: Tensor<T>,
    /// `[out_channels]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, kernel]),
            bias: Tensor::zeros(&[cout]),
            stride: stride.max(1),
            dilation: dilation.max(1),
            padding,
        }
    }

    /// Length-preserving (for stride 1) convolution with uniform fan-in init.
    pub fn same<R: Rng>(cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize, rng: &mut R) -> Self {
        let mut c = Self::zeros(cin, cout, kernel, stride, dilation, dilation * (kernel - 1) / 2);
        c.init_uniform(2.0, rng);
        c
    }

    /// Weights drawn from `U(-a, a)` with `a = sqrt(3 · gain / fan_in)`.
    pub fn init_uniform<R: Rng>(&mut self, gain: f64, rng: &mut R) {
        let fan_in = (self.in_channels() * self.kernel()) as f64;
        let bound = (3.0 * gain / fan_in).sqrt();
        self.weight = Tensor::uniform(self.weight.shape(), bound, rng);
        self.bias.fill_zero();
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `⌊(L + 2·pad − d·(k−1) − 1)/s⌋ + 1`, or `None` when the input is too short.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel() - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (b, c, l) = x.dims3()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let lo = self
            .out_len(l)
            .ok_or_else(|| Error::Shape(format!("input length {l} shorter than kernel span")))?;
        Ok((b, c, l, lo))
    }

    /// Range of output positions whose tap `k` reads inside the input.
    #[inline]
    fn valid(&self, k: usize, len_in: usize, len_out: usize) -> (usize, usize, isize) {
        let off = (k * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (len_in as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, len_out as isize);
        (lo.min(hi) as usize, hi as usize, off)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, cin, li, lo) = self.check(x)?;
        let cout = self.out_channels();
        let k = self.kernel();
        let w = self.weight.data();
        let xd = x.data();
        let mut y = vec![T::zero(); batch * cout * lo];
        let ranges: Vec<_> = (0..k).map(|kk| self.valid(kk, li, lo)).collect();
        for b in 0..batch {
            for co in 0..cout {
                let yrow = &mut y[(b * cout + co) * lo..][..lo];
                yrow.fill(self.bias.data()[co]);
                for ci in 0..cin {
                    let xrow = &xd[(b * cin + ci) * li..][..li];
                    for (kk, &(t0, t1, off)) in ranges.iter().enumerate() {
                        let wv = w[(co * cin + ci) * k + kk];
                        if t0 >= t1 {
                            continue;
                        }
                        if self.stride == 1 {
                            let base = (t0 as isize + off) as usize;
                            let src = &xrow[base..base + (t1 - t0)];
                            for (yv, &xv) in yrow[t0..t1].iter_mut().zip(src) {
                                *yv += wv * xv;
                            }
                        } else {
                            for t in t0..t1 {
                                let i = (t * self.stride) as isize + off;
                                yrow[t] += wv * xrow[i as usize];
                            }
                        }
                    }
                }
            }
        }
        let shape = if x.shape().len() == 3 {
            vec![batch, cout, lo]
        } else {
            vec![cout, lo]
        };
        Tensor::from_vec(&shape, y)
    }

    /// Accumulate parameter gradients into `grad` and return `∂L/∂x`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let (batch, cin, li, lo) = self.check(x)?;
        let cout = self.out_channels();
        if dy.len() != batch * cout * lo {
            return Err(Error::Shape(format!(
                "conv gradient has {} values, expected {}",
                dy.len(),
                batch * cout * lo
            )));
        }
        let k = self.kernel();
        let w = self.weight.data();
        let xd = x.data();
        let dyd = dy.data();
        let mut dx = vec![T::zero(); xd.len()];
        let gw = grad.weight.data_mut();
        let ranges: Vec<_> = (0..k).map(|kk| self.valid(kk, li, lo)).collect();
        for b in 0..batch {
            for co in 0..cout {
                let dyrow = &dyd[(b * cout + co) * lo..][..lo];
                grad.bias.data_mut()[co] += dyrow.iter().copied().sum::<T>();
                for ci in 0..cin {
                    let xrow = &xd[(b * cin + ci) * li..][..li];
                    let dxrow = &mut dx[(b * cin + ci) * li..][..li];
                    for (kk, &(t0, t1, off)) in ranges.iter().enumerate() {
                        let widx = (co * cin + ci) * k + kk;
                        let wv = w[widx];
                        if t0 >= t1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        if self.stride == 1 {
                            let base = (t0 as isize + off) as usize;
                            let n = t1 - t0;
                            for ((&g, &xv), dxv) in dyrow[t0..t1]
                                .iter()
                                .zip(&xrow[base..base + n])
                                .zip(dxrow[base..base + n].iter_mut())
                            {
                                acc += g * xv;
                                *dxv += wv * g;
                            }
                        } else {
                            for t in t0..t1 {
                                let i = ((t * self.stride) as isize + off) as usize;
                                acc += dyrow[t] * xrow[i];
                                dxrow[i] += wv * dyrow[t];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        Tensor::from_vec(x.shape(), dx)
    }
}

impl<T: Scalar> Module<T> for Conv1d<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}
