//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradient differences are measured absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameter_name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(parameter_name: impl Into<String>, max_relative_error: f64, tolerance: f64) -> Self {
        Self {
            parameter_name: parameter_name.into(),
            max_relative_error,
            passed: max_relative_error < tolerance,
        }
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.value().data()[0])
}

/// Central differences `(f(x + e_i) - f(x - e_i)) / 2 eps` for every element.
pub fn finite_difference_grad(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    input: &Array,
    epsilon: f64,
) -> Result<Array> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    scalar_of(&f(&Tensor::constant(input.clone()))?)?;
    let mut x = input.clone();
    let mut grad = Array::zeros(input.shape().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let up = scalar_of(&f(&Tensor::constant(x.clone()))?)?;
        x.data_mut()[i] = orig - epsilon;
        let down = scalar_of(&f(&Tensor::constant(x.clone()))?)?;
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Compares analytic and numeric gradients of `f` with respect to each input.
pub fn check_gradients(
    names: &[&str],
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Array],
    tolerance: f64,
) -> Result<Vec<GradCheckReport>> {
    if names.len() != inputs.len() {
        return Err(Error::InvalidInput("one name per input required".into()));
    }
    let vars: Vec<Tensor> = inputs.iter().cloned().map(Tensor::variable).collect();
    let grads = f(&vars)?.backward()?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, name) in names.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[k])
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[k].shape().to_vec()));
        let numeric = finite_difference_grad(
            |x| {
                let mut args: Vec<Tensor> = inputs.iter().cloned().map(Tensor::constant).collect();
                args[k] = x.clone();
                f(&args)
            },
            &inputs[k],
            DEFAULT_EPSILON,
        )?;
        let err = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        reports.push(GradCheckReport::new(*name, err, tolerance));
    }
    Ok(reports)
}

/// Checks gradients of `f` with respect to parameters. With `max_coords`,
/// each parameter is probed at that many seeded random coordinates.
pub fn check_param_gradients(
    f: impl Fn() -> Result<Tensor>,
    params: &[Param],
    max_coords: Option<usize>,
    seed: u64,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>> {
    let grads = f()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(params.len());
    for p in params {
        let n = p.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let zeros = Array::zeros(p.shape());
        let analytic = grads.param(p).unwrap_or(&zeros);
        let mut err: f64 = 0.0;
        for &i in &coords {
            let orig = p.value().data()[i];
            p.update(|a| a.data_mut()[i] = orig + DEFAULT_EPSILON);
            let up = scalar_of(&f()?);
            p.update(|a| a.data_mut()[i] = orig - DEFAULT_EPSILON);
            let down = scalar_of(&f()?);
            p.update(|a| a.data_mut()[i] = orig);
            let numeric = (up? - down?) / (2.0 * DEFAULT_EPSILON);
            err = err.max(relative_error(analytic.data()[i], numeric));
        }
        reports.push(GradCheckReport::new(p.name(), err, tolerance));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sigmoid;

    #[test]
    fn square_at_three() {
        let g = finite_difference_grad(|x| x.square()?.sum_all(), &Array::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_grad(
            |_| Ok(Tensor::constant(Array::scalar(4.0))),
            &Array::from_vec(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn sigmoid_matches_analytic_derivative() {
        let x = Array::from_fn([7], |i| (i as f64 * 0.37).sin());
        let g = finite_difference_grad(|x| x.sigmoid()?.sum_all(), &x, 1e-5).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            let s = sigmoid(*xi);
            let a = s * (1.0 - s);
            assert!((gi - a).abs() / a < 1e-6);
        }
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let r = finite_difference_grad(|x| Ok(x.clone()), &Array::zeros([2]), 1e-5);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
