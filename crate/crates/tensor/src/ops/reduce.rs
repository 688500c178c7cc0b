use crate::array::{broadcast_to, sum_to_shape, Array};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

fn drop_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

impl Tensor {
    pub fn sum_all(&self) -> Result<Tensor> {
        let value = Array::scalar(self.value().sum());
        Tensor::from_op(
            "sum_all",
            value,
            vec![self.clone()],
            Box::new(|inputs, _, g| {
                Ok(vec![Some(Array::full(inputs[0].shape().to_vec(), g.data()[0]))])
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len().max(1) as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    /// Sum over `axes`; reduced axes are kept with extent 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        if let Some(&a) = axes.iter().find(|&&a| a >= self.ndim()) {
            return shape_err("sum_axes", format!("axis {a} out of range for {:?}", self.shape()));
        }
        let kshape = keepdim_shape(self.shape(), axes);
        let summed = sum_to_shape(self.value(), &kshape)?;
        let value = if keepdim {
            summed
        } else {
            summed.reshape(drop_axes(self.shape(), axes))?
        };
        Tensor::from_op(
            "sum_axes",
            value,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let g = g.clone().reshape(kshape.clone())?;
                Ok(vec![Some(broadcast_to(&g, inputs[0].shape())?)])
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes, keepdim)?.mul_scalar(1.0 / count.max(1) as f64)
    }

    /// Maximum along one axis. The gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.ndim() {
            return shape_err("max_axis", format!("axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if len == 0 {
            return shape_err("max_axis", "empty axis");
        }
        let x = self.value().data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    let v = x[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = k;
                    }
                }
            }
        }
        let shape = if keepdim {
            keepdim_shape(self.shape(), &[axis])
        } else {
            drop_axes(self.shape(), &[axis])
        };
        Tensor::from_op(
            "max_axis",
            Array::new(shape, out)?,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let mut gx = Array::zeros(inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        gd[(o * len + arg[slot]) * inner + i] += g.data()[slot];
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Mean over the two trailing (spatial) axes.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return shape_err("global_avg_pool", format!("{:?}", self.shape()));
        }
        self.mean_axes(&[nd - 2, nd - 1], false)
    }

    /// Maximum over the two trailing (spatial) axes.
    pub fn global_max_pool(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return shape_err("global_max_pool", format!("{:?}", self.shape()));
        }
        let mut flat = self.shape()[..nd - 2].to_vec();
        flat.push(self.shape()[nd - 2] * self.shape()[nd - 1]);
        self.reshape(&flat)?.max_axis(nd - 2, false)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return shape_err("softmax", format!("axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.value().data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - m).exp();
                    y[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[idx(k)] /= s;
                }
            }
        }
        Tensor::from_op(
            "softmax",
            Array::new(self.shape().to_vec(), y)?,
            vec![self.clone()],
            Box::new(move |_, out, g| {
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[idx(k)] * gd[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                Ok(vec![Some(Array::new(out.shape().to_vec(), gx)?)])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::constant(Array::zeros([3]));
        for v in x.softmax(0).unwrap().to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_and_max_axes() {
        let x = Tensor::constant(Array::new([2, 3], vec![1.0, 5.0, 2.0, 7.0, 0.0, 3.0]).unwrap());
        assert_eq!(x.sum_axes(&[1], false).unwrap().to_vec(), vec![8.0, 10.0]);
        assert_eq!(x.sum_axes(&[0], true).unwrap().shape(), &[1, 3]);
        assert_eq!(x.max_axis(0, false).unwrap().to_vec(), vec![7.0, 5.0, 3.0]);
        assert_eq!(x.mean_axes(&[0, 1], false).unwrap().item().unwrap(), 3.0);
    }
}
