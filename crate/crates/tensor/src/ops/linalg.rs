use crate::array::{gemm, Array, MatView};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

impl Tensor {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(MatView::new(a.data(), m, k), MatView::new(b.data(), k, n), &mut out, 0.0);
        Tensor::from_op(
            "matmul",
            Array::new([m, n], out)?,
            vec![self.clone(), other.clone()],
            Box::new(move |inputs, _, g| {
                let (a, b) = (inputs[0].value(), inputs[1].value());
                let gv = MatView::new(g.data(), m, n);
                let ga = if inputs[0].requires_grad() {
                    let mut d = vec![0.0; m * k];
                    gemm(gv, MatView::new(b.data(), k, n).t(), &mut d, 0.0);
                    Some(Array::new([m, k], d)?)
                } else {
                    None
                };
                let gb = if inputs[1].requires_grad() {
                    let mut d = vec![0.0; k * n];
                    gemm(MatView::new(a.data(), m, k).t(), gv, &mut d, 0.0);
                    Some(Array::new([k, n], d)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }
}
