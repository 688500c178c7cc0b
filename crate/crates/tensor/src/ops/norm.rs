//! Fused normalization layers.

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Where batch-norm statistics come from.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Computed from the input itself.
    Batch,
    /// Fixed per-channel mean and (biased) variance.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel batch moments observed during a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance (`m - 1` denominator), as tracked by running stats.
    pub var_unbiased: Vec<f64>,
}

fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h * w)),
        [n, c, h, w] => Some((n, c, h * w)),
        _ => None,
    }
}

fn channel_fold(x: &[f64], n: usize, c: usize, hw: usize, ch: usize, mut f: impl FnMut(usize, f64)) {
    for b in 0..n {
        let base = (b * c + ch) * hw;
        for k in 0..hw {
            f(base + k, x[base + k]);
        }
    }
}

impl Tensor {
    /// Batch normalization over `[C,H,W]` or `[N,C,H,W]` with per-channel
    /// `gamma` and `beta` of shape `[C]`.
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &NormStats,
        eps: f64,
    ) -> Result<(Tensor, Option<BatchMoments>)> {
        let Some((n, c, hw)) = channel_layout(self.shape()) else {
            return shape_err("batch_norm", format!("expected image input, got {:?}", self.shape()));
        };
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err("batch_norm", format!("affine params must be [{c}]"));
        }
        let m = n * hw;
        if m == 0 {
            return shape_err("batch_norm", "empty input");
        }
        let x = self.value().data();
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    channel_fold(x, n, c, hw, ch, |_, v| s += v);
                    let mu = s / m as f64;
                    let mut ss = 0.0;
                    channel_fold(x, n, c, hw, ch, |_, v| ss += (v - mu) * (v - mu));
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
                    .collect();
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(moments))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm", format!("running stats must have {c} entries"));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let batch = moments.is_some();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        for ch in 0..c {
            channel_fold(x, n, c, hw, ch, |i, v| {
                let h = (v - mean[ch]) * inv[ch];
                xhat[i] = h;
                y[i] = gv[ch] * h + bv[ch];
            });
        }
        let out = Tensor::from_op(
            "batch_norm",
            Array::new(self.shape().to_vec(), y)?,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |inputs, _, g| {
                let gd = g.data();
                let gamma = inputs[1].value().data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    channel_fold(gd, n, c, hw, ch, |i, gi| {
                        dgamma[ch] += gi * xhat[i];
                        dbeta[ch] += gi;
                    });
                }
                let dx = if inputs[0].requires_grad() {
                    let mut dx = vec![0.0; gd.len()];
                    for ch in 0..c {
                        let k = gamma[ch] * inv[ch];
                        if batch {
                            let (sg, sgx) = (dbeta[ch] / m as f64, dgamma[ch] / m as f64);
                            channel_fold(gd, n, c, hw, ch, |i, gi| {
                                dx[i] = k * (gi - sg - xhat[i] * sgx);
                            });
                        } else {
                            channel_fold(gd, n, c, hw, ch, |i, gi| dx[i] = k * gi);
                        }
                    }
                    Some(Array::new(inputs[0].shape().to_vec(), dx)?)
                } else {
                    None
                };
                Ok(vec![dx, Some(Array::from_vec(dgamma)), Some(Array::from_vec(dbeta))])
            }),
        )?;
        Ok((out, moments))
    }

    /// Layer normalization over the last axis with `[D]` affine params.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return shape_err(
                "layer_norm",
                format!("{:?} with affine {:?}", self.shape(), gamma.shape()),
            );
        }
        let rows = self.len() / d;
        let x = self.value().data();
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            inv[r] = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let h = (row[j] - mu) * inv[r];
                xhat[r * d + j] = h;
                y[r * d + j] = gv[j] * h + bv[j];
            }
        }
        Tensor::from_op(
            "layer_norm",
            Array::new(self.shape().to_vec(), y)?,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |inputs, _, g| {
                let gd = g.data();
                let gamma = inputs[1].value().data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let i = r * d + j;
                        dgamma[j] += gd[i] * xhat[i];
                        dbeta[j] += gd[i];
                        let dh = gd[i] * gamma[j];
                        s1 += dh;
                        s2 += dh * xhat[i];
                    }
                    let (s1, s2) = (s1 / d as f64, s2 / d as f64);
                    for j in 0..d {
                        let i = r * d + j;
                        dx[i] = inv[r] * (gd[i] * gamma[j] - s1 - xhat[i] * s2);
                    }
                }
                Ok(vec![
                    Some(Array::new(inputs[0].shape().to_vec(), dx)?),
                    Some(Array::from_vec(dgamma)),
                    Some(Array::from_vec(dbeta)),
                ])
            }),
        )
    }
}
