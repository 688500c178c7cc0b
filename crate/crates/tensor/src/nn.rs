//! Parameterized layers.

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::ops::NormStats;
use crate::param::{Builder, Init, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        Self::with_init(b, cin, cout, kernel, stride, padding, bias, Init::He { fan_in })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        b: &Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[cout, cin, kernel, kernel], init)?,
            bias: if bias { Some(b.param("bias", &[cout], Init::Zeros)?) } else { None },
            stride,
            padding,
        })
    }

    /// A `k x k` convolution that preserves resolution.
    pub fn same(b: &Builder, cin: usize, cout: usize, kernel: usize, bias: bool) -> Result<Self> {
        Self::new(b, cin, cout, kernel, 1, kernel / 2, bias)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias.as_ref().map(Param::tensor);
        x.conv2d(&self.weight.tensor(), bias.as_ref(), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        b: &Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel / (stride * stride).max(1);
        Ok(Self {
            weight: b.param("weight", &[cin, cout, kernel, kernel], Init::He { fan_in })?,
            bias: if bias { Some(b.param("bias", &[cout], Init::Zeros)?) } else { None },
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias.as_ref().map(Param::tensor);
        x.conv_transpose2d(&self.weight.tensor(), bias.as_ref(), self.stride, self.padding)
    }
}

/// Batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[channels], Init::Ones)?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
            running_mean: b.buffer("running_mean", Array::zeros([channels]))?,
            running_var: b.buffer("running_var", Array::ones([channels]))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In training mode normalizes with batch moments and folds them into
    /// the running statistics; otherwise uses the running statistics.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let stats = if train {
            NormStats::Batch
        } else {
            NormStats::Fixed {
                mean: self.running_mean.value().data().to_vec(),
                var: self.running_var.value().data().to_vec(),
            }
        };
        let (y, moments) = x.batch_norm(&self.gamma.tensor(), &self.beta.tensor(), &stats, self.eps)?;
        if let Some(m) = moments {
            let mo = self.momentum;
            self.running_mean.update(|a| {
                for (r, v) in a.data_mut().iter_mut().zip(&m.mean) {
                    *r = (1.0 - mo) * *r + mo * v;
                }
            });
            self.running_var.update(|a| {
                for (r, v) in a.data_mut().iter_mut().zip(&m.var_unbiased) {
                    *r = (1.0 - mo) * *r + mo * v;
                }
            });
        }
        Ok(y)
    }
}

/// Affine map `x W + b` with `W: [in, out]` for inputs `[N, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(b: &Builder, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(b, din, dout, Init::He { fan_in: din })
    }

    pub fn with_init(b: &Builder, din: usize, dout: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[din, dout], init)?,
            bias: b.param("bias", &[dout], Init::Zeros)?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 {
            return shape_err("linear", format!("expected [N, in], got {:?}", x.shape()));
        }
        x.matmul(&self.weight.tensor())?.add(&self.bias.tensor())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Ones)?,
            beta: b.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma.tensor(), &self.beta.tensor(), self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let store = ParamStore::new();
        let bn = BatchNorm2d::new(&Builder::new(&store, 0).sub("bn"), 1).unwrap();
        let x = Tensor::constant(Array::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&x, false).unwrap();
        assert_eq!(bn.running_mean.value().data(), &[0.0]);
        bn.forward(&x, true).unwrap();
        assert!((bn.running_mean.value().data()[0] - 0.25).abs() < 1e-12);
        // Unbiased variance of 1..4 is 5/3.
        let expect = 0.9 + 0.1 * 5.0 / 3.0;
        assert!((bn.running_var.value().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_shapes() {
        let store = ParamStore::new();
        let l = Linear::new(&Builder::new(&store, 1).sub("fc"), 3, 2).unwrap();
        let y = l.forward(&Tensor::constant(Array::ones([4, 3]))).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert_eq!(store.get("fc.weight").unwrap().shape(), vec![3, 2]);
    }
}
