use cbhvt_tensor::nn::{Conv2d, Linear};
use cbhvt_tensor::{Builder, Init, Tensor};

use crate::ctx::Ctx;
use crate::error::{config_err, Result};

/// Gate logits are clamped here so sigmoid never rounds to exactly 0 or 1.
pub const GATE_LOGIT_BOUND: f64 = 30.0;

/// Sequential channel then spatial gating:
/// `F' = M_c(F) * F`, `F'' = M_s(F') * F'`.
///
/// `M_c = sigmoid(MLP(avgpool F) + MLP(maxpool F))` is `C x 1 x 1`;
/// `M_s = sigmoid(conv7x7([mean_c F'; max_c F']))` is `1 x H x W`.
#[derive(Debug, Clone)]
pub struct AttentionRefine {
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub spatial: Conv2d,
    pub channels: usize,
}

/// Output of [`AttentionRefine::forward_with_gates`].
#[derive(Debug, Clone)]
pub struct Gated {
    pub output: Tensor,
    pub channel_gate: Tensor,
    pub spatial_gate: Tensor,
}

impl AttentionRefine {
    pub fn new(b: &Builder, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || reduction > channels {
            return config_err(format!(
                "attention reduction ratio {reduction} must be in 1..={channels}"
            ));
        }
        let hidden = channels / reduction;
        // Pooled descriptors are mostly non-negative; a signed first layer
        // with few hidden units can start with every unit dead.
        let mlp_in = Linear::new(&b.sub("mlp_in"), channels, hidden)?;
        mlp_in.weight.update(|a| a.data_mut().iter_mut().for_each(|v| *v = v.abs()));
        Ok(Self {
            mlp_in,
            mlp_out: Linear::with_init(&b.sub("mlp_out"), hidden, channels, Init::Scaled { fan_in: hidden })?,
            spatial: Conv2d::new(&b.sub("spatial"), 2, 1, 7, 1, 3, true)?,
            channels,
        })
    }

    pub fn forward(&self, f: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_with_gates(f, ctx)?.output)
    }

    pub fn forward_with_gates(&self, f: &Tensor, ctx: &Ctx) -> Result<Gated> {
        let c = self.channels;
        let pooled = Tensor::concat(
            &[
                f.global_avg_pool()?.reshape(&[1, c])?,
                f.global_max_pool()?.reshape(&[1, c])?,
            ],
            0,
        )?;
        let mlp = self.mlp_out.forward(&self.mlp_in.forward(&pooled)?.relu()?)?;
        let channel_gate = mlp.sum_axes(&[0], false)?.clamp(-GATE_LOGIT_BOUND, GATE_LOGIT_BOUND)?.sigmoid()?.reshape(&[c, 1, 1])?;
        let refined = f.mul(&channel_gate)?;

        let descriptor = Tensor::concat(
            &[refined.mean_axes(&[0], true)?, refined.max_axis(0, true)?],
            0,
        )?;
        let spatial_gate = self.spatial.forward(&descriptor)?.clamp(-GATE_LOGIT_BOUND, GATE_LOGIT_BOUND)?.sigmoid()?;
        ctx.record_gates(&channel_gate);
        ctx.record_gates(&spatial_gate);
        Ok(Gated {
            output: refined.mul(&spatial_gate)?,
            channel_gate,
            spatial_gate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbhvt_tensor::{Array, ParamStore};

    #[test]
    fn zero_parameters_quarter_the_input() {
        let store = ParamStore::new();
        let att = AttentionRefine::new(&Builder::new(&store, 1), 4, 2).unwrap();
        for p in store.params() {
            p.update(|a| a.data_mut().fill(0.0));
        }
        let f = Array::from_fn([4, 3, 5], |i| i as f64 - 20.0);
        let g = att.forward_with_gates(&Tensor::constant(f.clone()), &Ctx::eval()).unwrap();
        assert_eq!(g.channel_gate.shape(), [4, 1, 1]);
        assert_eq!(g.spatial_gate.shape(), [1, 3, 5]);
        assert_eq!(g.output.shape(), [4, 3, 5]);
        for (o, x) in g.output.to_vec().iter().zip(f.data()) {
            assert_eq!(*o, 0.25 * x);
        }
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let store = ParamStore::new();
        let att = AttentionRefine::new(&Builder::new(&store, 2), 8, 4).unwrap();
        let f = Array::from_fn([8, 6, 6], |i| ((i * 13) % 29) as f64 - 14.0);
        let ctx = Ctx::eval().probed();
        att.forward(&Tensor::constant(f), &ctx).unwrap();
        let probe = ctx.probe().unwrap();
        assert!(probe.gates_in_open_unit_interval());
    }

    #[test]
    fn reduction_above_channels_is_config_error() {
        let store = ParamStore::new();
        assert_eq!(AttentionRefine::new(&Builder::new(&store, 1), 2, 4).unwrap_err().exit_code(), 2);
    }
}
