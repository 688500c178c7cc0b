use crate::array::{contiguous_strides, numel, Array};
use crate::error::{shape_err, Error, Result};
use crate::ops::reduce::split_axis;
use crate::tensor::Tensor;

fn permute_array(x: &Array, axes: &[usize]) -> Result<Array> {
    let n = x.ndim();
    let mut seen = vec![false; n];
    if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
        return shape_err("permute", format!("{axes:?} is not a permutation of {n} axes"));
    }
    let in_strides = contiguous_strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    if total > 0 {
        let mut idx = vec![0usize; n];
        let mut off = 0usize;
        let xd = x.data();
        for _ in 0..total {
            out.push(xd[off]);
            for d in (0..n).rev() {
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Array::new(out_shape, out)
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let value = self.value().clone().reshape(shape.to_vec())?;
        Tensor::from_op(
            "reshape",
            value,
            vec![self.clone()],
            Box::new(|inputs, _, g| Ok(vec![Some(g.clone().reshape(inputs[0].shape().to_vec())?)])),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let value = permute_array(self.value(), axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(
            "permute",
            value,
            vec![self.clone()],
            Box::new(move |_, _, g| Ok(vec![Some(permute_array(g, &inverse)?)])),
        )
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return shape_err("t", format!("expected a matrix, got {:?}", self.shape()));
        }
        self.permute(&[1, 0])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let nd = first.ndim();
        if axis >= nd {
            return shape_err("concat", format!("axis {axis} out of range for {:?}", first.shape()));
        }
        for p in parts {
            let ok = p.ndim() == nd
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{:?} vs {:?}", p.shape(), first.shape()));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let chunk = l * inner;
                out.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op(
            "concat",
            Array::new(shape, out)?,
            parts.to_vec(),
            Box::new(move |inputs, _, g| {
                let mut grads = Vec::with_capacity(inputs.len());
                let mut start = 0;
                for (inp, &l) in inputs.iter().zip(&lens) {
                    if inp.requires_grad() {
                        let mut gd = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let base = (o * total_len + start) * inner;
                            gd.extend_from_slice(&g.data()[base..base + l * inner]);
                        }
                        grads.push(Some(Array::new(inp.shape().to_vec(), gd)?));
                    } else {
                        grads.push(None);
                    }
                    start += l;
                }
                Ok(grads)
            }),
        )
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape()),
            );
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        Tensor::from_op(
            "narrow",
            Array::new(shape, out)?,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let mut gx = Array::zeros(inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gd[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Gathers entries of the leading axis; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        if self.ndim() == 0 {
            return shape_err("index_select", "scalar input");
        }
        let rows = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return shape_err("index_select", format!("index {bad} out of range {rows}"));
        }
        let row = self.len() / rows.max(1);
        let x = self.value().data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Tensor::from_op(
            "index_select",
            Array::new(shape, out)?,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let mut gx = Array::zeros(inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..row {
                        gd[i * row + j] += g.data()[k * row + j];
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// For a matrix `[rows, cols]`, picks `x[r, cols_idx[r]]` per row.
    pub fn pick(&self, cols_idx: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 || self.shape()[0] != cols_idx.len() {
            return shape_err(
                "pick",
                format!("{:?} with {} indices", self.shape(), cols_idx.len()),
            );
        }
        let cols = self.shape()[1];
        if let Some(&bad) = cols_idx.iter().find(|&&c| c >= cols) {
            return Err(Error::InvalidInput(format!("class index {bad} out of range {cols}")));
        }
        let x = self.value().data();
        let out: Vec<f64> = cols_idx.iter().enumerate().map(|(r, &c)| x[r * cols + c]).collect();
        let cols_idx = cols_idx.to_vec();
        Tensor::from_op(
            "pick",
            Array::from_vec(out),
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let mut gx = Array::zeros(inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                for (r, &c) in cols_idx.iter().enumerate() {
                    gd[r * cols + c] += g.data()[r];
                }
                Ok(vec![Some(gx)])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arange(shape: &[usize]) -> Tensor {
        Tensor::constant(Array::from_fn(shape.to_vec(), |i| i as f64))
    }

    #[test]
    fn permute_moves_axes() {
        let x = arange(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.value().get(&[3, 1, 2]), x.value().get(&[1, 2, 3]));
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = arange(&[2, 2, 3]);
        let b = arange(&[2, 1, 3]).mul_scalar(-1.0).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().value(), a.value());
        assert_eq!(c.narrow(1, 2, 1).unwrap().value(), b.value());
    }

    #[test]
    fn index_select_repeats_rows() {
        let x = arange(&[3, 2]);
        let y = x.index_select(&[2, 0, 2]).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    }
}
