use crate::array::{broadcast_binary, sum_to_shape, Array};
use crate::error::Result;
use crate::tensor::Tensor;

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative from (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let value = x.value().map(f);
    Tensor::from_op(
        op,
        value,
        vec![x.clone()],
        Box::new(move |inputs, out, g| {
            let xin = inputs[0].value().data();
            let data = xin
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            Ok(vec![Some(Array::new(g.shape().to_vec(), data)?)])
        }),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a + b)?;
        Tensor::from_op(
            "add",
            value,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, _, g| {
                Ok(vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| sum_to_shape(g, inputs[0].shape()))
                        .transpose()?,
                    inputs[1]
                        .requires_grad()
                        .then(|| sum_to_shape(g, inputs[1].shape()))
                        .transpose()?,
                ])
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a - b)?;
        Tensor::from_op(
            "sub",
            value,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, _, g| {
                Ok(vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| sum_to_shape(g, inputs[0].shape()))
                        .transpose()?,
                    inputs[1]
                        .requires_grad()
                        .then(|| sum_to_shape(&g.scale(-1.0), inputs[1].shape()))
                        .transpose()?,
                ])
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a * b)?;
        Tensor::from_op(
            "mul",
            value,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, _, g| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = if a.requires_grad() {
                    Some(sum_to_shape(
                        &broadcast_binary(g, b.value(), |x, y| x * y)?,
                        a.shape(),
                    )?)
                } else {
                    None
                };
                let gb = if b.requires_grad() {
                    Some(sum_to_shape(
                        &broadcast_binary(g, a.value(), |x, y| x * y)?,
                        b.shape(),
                    )?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let value = broadcast_binary(self.value(), other.value(), |a, b| a / b)?;
        Tensor::from_op(
            "div",
            value,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, out, g| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = if a.requires_grad() {
                    Some(sum_to_shape(
                        &broadcast_binary(g, b.value(), |x, y| x / y)?,
                        a.shape(),
                    )?)
                } else {
                    None
                };
                let gb = if b.requires_grad() {
                    // d(a/b)/db = -(a/b)/b
                    let go = g.zip_map(out, |x, y| -x * y)?;
                    Some(sum_to_shape(
                        &broadcast_binary(&go, b.value(), |x, y| x / y)?,
                        b.shape(),
                    )?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        unary(self, "mul_scalar", move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        unary(self, "add_scalar", move |v| v + s, |_, _| 1.0)
    }

    /// `s - x`
    pub fn rsub_scalar(&self, s: f64) -> Result<Tensor> {
        unary(self, "rsub_scalar", move |v| s - v, |_, _| -1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        unary(self, "ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        unary(self, "sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Result<Tensor> {
        unary(self, "square", |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Result<Tensor> {
        unary(self, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary(self, "relu", |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        unary(
            self,
            "gelu",
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        unary(
            self,
            "clamp",
            move |v| v.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        let x = Tensor::constant(Array::from_vec(vec![-2.0, 0.0, 3.0]));
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 0.0, 3.0]);
        assert_eq!(x.sigmoid().unwrap().to_vec()[1], 0.5);
        assert!((x.gelu().unwrap().to_vec()[2] - 2.996_363).abs() < 1e-5);
    }

    #[test]
    fn broadcasting_mul_gradient_sums_over_broadcast_axes() {
        let a = Tensor::variable(Array::ones([2, 3]));
        let b = Tensor::variable(Array::from_vec(vec![1.0, 2.0, 3.0]));
        let y = a.mul(&b).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(&b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(&a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn log_of_zero_is_a_hard_error() {
        let x = Tensor::constant(Array::from_vec(vec![0.0]));
        assert!(matches!(
            x.ln(),
            Err(crate::Error::NonFinite { op: "ln" })
        ));
    }
}
