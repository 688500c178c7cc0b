//! Dense row-major `f64` storage shared by every tensor operation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// A dense, row-major n-dimensional array of `f64`.
///
/// The product of `shape` always equals `data.len()`. A zero-dimensional
/// array holds exactly one value.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Array{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ... ({} values)", self.data.len())?;
        }
        write!(f, "]")
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Array {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "item() on array of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            );
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn strides(&self) -> Vec<usize> {
        contiguous_strides(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two arrays of identical shape.
    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Array) -> Result<f64> {
        Ok(self.zip_map(other, |a, b| (a - b).abs())?.max_abs())
    }
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err("broadcast", format!("{a:?} vs {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `input` viewed through `out_shape`, with zero stride on
/// broadcast axes. `input` must be broadcast-compatible with `out_shape`.
pub(crate) fn broadcast_strides(input: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(input);
    let lead = out_shape.len() - input.len();
    (0..out_shape.len())
        .map(|i| {
            if i < lead || input[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Walks every element of `out_shape` in row-major order, calling
/// `f(out_index, off_a, off_b)` with the broadcast offsets of two inputs.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let n = out_shape.len();
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[n - 1];
    let (ia, ib) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = 0usize;
    for _ in 0..total / inner {
        for k in 0..inner {
            f(out, oa + k * ia, ob + k * ib);
            out += 1;
        }
        for d in (0..n - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let mut data = vec![0.0; numel(&shape)];
    for_each_broadcast2(&shape, &sa, &sb, |o, ia, ib| {
        data[o] = f(a.data[ia], b.data[ib]);
    });
    Ok(Array { shape, data })
}

/// Sums `grad` (shaped like a broadcast result) down to `target` shape.
pub fn sum_to_shape(grad: &Array, target: &[usize]) -> Result<Array> {
    if grad.shape == target {
        return Ok(grad.clone());
    }
    let expect = broadcast_shape(target, &grad.shape)?;
    if expect != grad.shape {
        return shape_err(
            "sum_to_shape",
            format!("{:?} does not broadcast to {:?}", target, grad.shape),
        );
    }
    let st = broadcast_strides(target, &grad.shape);
    let zero = vec![0; grad.shape.len()];
    let mut data = vec![0.0; numel(target)];
    for_each_broadcast2(&grad.shape, &st, &zero, |o, it, _| {
        data[it] += grad.data[o];
    });
    Ok(Array {
        shape: target.to_vec(),
        data,
    })
}

/// Materializes `a` broadcast to `shape`.
pub fn broadcast_to(a: &Array, shape: &[usize]) -> Result<Array> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    let check = broadcast_shape(&a.shape, shape)?;
    if check != shape {
        return shape_err(
            "broadcast_to",
            format!("{:?} cannot broadcast to {:?}", a.shape, shape),
        );
    }
    let sa = broadcast_strides(&a.shape, shape);
    let zero = vec![0; shape.len()];
    let mut data = vec![0.0; numel(shape)];
    for_each_broadcast2(shape, &sa, &zero, |o, ia, _| data[o] = a.data[ia]);
    Ok(Array {
        shape: shape.to_vec(),
        data,
    })
}

/// A strided 2-D view used to feed the GEMM kernel without copies.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// `c = beta * c + a · b` where `c` is a contiguous `a.rows × b.cols` block.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: the asserts above bound every strided access inside the
    // borrowed slices, and `c` is exclusively borrowed with m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[3, 1, 5], &[4, 1]).unwrap(), vec![3, 4, 5]);
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[3], &[4]).is_err());
    }

    #[test]
    fn sum_to_shape_reverses_broadcast() {
        let g = Array::ones([2, 3, 4]);
        let s = sum_to_shape(&g, &[3, 1]).unwrap();
        assert_eq!(s.shape(), &[3, 1]);
        assert!(s.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn gemm_handles_transposed_views() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 2x3, use transposed
        let mut c = vec![0.0; 4];
        gemm(MatView::new(&a, 2, 3), MatView::new(&b, 2, 3).t(), &mut c, 0.0);
        assert_eq!(c, vec![1.0, 6.0, 4.0, 15.0]);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Array::new([2, 2], vec![1.0; 3]).is_err());
    }
}
