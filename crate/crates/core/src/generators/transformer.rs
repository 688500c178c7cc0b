use cbhvt_tensor::nn::{Conv2d, LayerNorm, Linear};
use cbhvt_tensor::{Builder, Init, Param, Tensor};

use crate::ctx::Ctx;
use crate::error::{config_err, Result};

/// Token grid extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn tokens(self) -> usize {
        self.h * self.w
    }
}

/// `[C, H, W]` map to `[H*W, C]` tokens.
pub fn map_to_tokens(x: &Tensor) -> Result<(Tensor, Grid)> {
    let &[c, h, w] = x.shape() else {
        return config_err(format!("expected a [C,H,W] map, got {:?}", x.shape()));
    };
    Ok((x.reshape(&[c, h * w])?.t()?, Grid { h, w }))
}

pub fn tokens_to_map(x: &Tensor, grid: Grid) -> Result<Tensor> {
    let c = x.shape()[1];
    Ok(x.t()?.reshape(&[c, grid.h, grid.w])?)
}

/// Multi-head attention whose keys and values come from a token grid
/// downsampled by a strided convolution.
#[derive(Debug, Clone)]
pub struct SpatialReductionAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub reduce: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub reduction: usize,
}

/// Attention output with the per-head weight matrices `[N, M]`.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Tensor,
    pub weights: Vec<Tensor>,
}

impl SpatialReductionAttention {
    pub fn new(b: &Builder, dim: usize, heads: usize, reduction: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return config_err(format!("{heads} heads do not divide width {dim}"));
        }
        if reduction == 0 {
            return config_err("spatial reduction ratio must be positive");
        }
        let lin = |name: &str| Linear::with_init(&b.sub(name), dim, dim, Init::Scaled { fan_in: dim });
        let reduce = if reduction > 1 {
            Some((
                Conv2d::new(&b.sub("sr"), dim, dim, reduction, reduction, 0, true)?,
                LayerNorm::new(&b.sub("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            proj: lin("proj")?,
            reduce,
            heads,
            reduction,
        })
    }

    pub fn attend(&self, x: &Tensor, grid: Grid, ctx: &Ctx) -> Result<Attended> {
        if grid.h % self.reduction != 0 || grid.w % self.reduction != 0 {
            return config_err(format!(
                "spatial reduction {} does not divide the {}x{} token grid",
                self.reduction, grid.h, grid.w
            ));
        }
        let dim = x.shape()[1];
        let q = self.q.forward(x)?;
        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let reduced = conv.forward(&tokens_to_map(x, grid)?)?;
                norm.forward(&map_to_tokens(&reduced)?.0)?
            }
            None => x.clone(),
        };
        let k = self.k.forward(&kv_src)?;
        let v = self.v.forward(&kv_src)?;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (q.narrow(1, h * dh, dh)?, k.narrow(1, h * dh, dh)?, v.narrow(1, h * dh, dh)?);
            let a = qh.matmul(&kh.t()?)?.mul_scalar(scale)?.softmax(1)?;
            ctx.record_softmax(&a);
            outs.push(a.matmul(&vh)?);
            weights.push(a);
        }
        let joined = if outs.len() == 1 { outs.pop().expect("one head") } else { Tensor::concat(&outs, 1)? };
        Ok(Attended {
            output: self.proj.forward(&joined)?,
            weights,
        })
    }
}

/// Pre-norm transformer block: attention and MLP sub-blocks with residuals.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SpatialReductionAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(b: &Builder, dim: usize, heads: usize, reduction: usize, mlp_ratio: usize) -> Result<Self> {
        let hidden = dim * mlp_ratio.max(1);
        Ok(Self {
            norm1: LayerNorm::new(&b.sub("norm1"), dim)?,
            attn: SpatialReductionAttention::new(&b.sub("attn"), dim, heads, reduction)?,
            norm2: LayerNorm::new(&b.sub("norm2"), dim)?,
            fc1: Linear::with_init(&b.sub("fc1"), dim, hidden, Init::Scaled { fan_in: dim })?,
            fc2: Linear::with_init(&b.sub("fc2"), hidden, dim, Init::Scaled { fan_in: hidden })?,
        })
    }

    pub fn forward(&self, x: &Tensor, grid: Grid, ctx: &Ctx) -> Result<Tensor> {
        let x = x.add(&self.attn.attend(&self.norm1.forward(x)?, grid, ctx)?.output)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok(x.add(&h)?)
    }
}

/// One pyramid stage: strided patch embedding, positional embedding and
/// transformer blocks.
#[derive(Debug, Clone)]
pub struct TransformerStage {
    pub embed: Conv2d,
    pub embed_norm: LayerNorm,
    /// `[C, h_ref, w_ref]`, resized to the actual grid when it differs.
    pub position: Param,
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &Builder,
        cin: usize,
        dim: usize,
        patch: usize,
        reference_grid: usize,
        depth: usize,
        heads: usize,
        reduction: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            embed: Conv2d::new(&b.sub("embed"), cin, dim, patch, patch, 0, true)?,
            embed_norm: LayerNorm::new(&b.sub("embed_norm"), dim)?,
            position: b.param("position", &[dim, reference_grid, reference_grid], Init::Normal { std: 0.02 })?,
            blocks: (0..depth)
                .map(|i| TransformerBlock::new(&b.sub(format!("block{i}")), dim, heads, reduction, mlp_ratio))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (tokens, grid) = map_to_tokens(&self.embed.forward(x)?)?;
        let pos = self.position.tensor().resize_bilinear(grid.h, grid.w)?;
        let mut t = self.embed_norm.forward(&tokens)?.add(&map_to_tokens(&pos)?.0)?;
        for block in &self.blocks {
            t = block.forward(&t, grid, ctx)?;
        }
        tokens_to_map(&t, grid)
    }
}

/// Four-stage shrinking pyramid of transformer stages.
#[derive(Debug, Clone)]
pub struct PyramidTransformer {
    pub stages: Vec<TransformerStage>,
}

/// Input size the positional embeddings are laid out for.
pub const REFERENCE_INPUT: usize = 256;

impl PyramidTransformer {
    pub fn new(
        b: &Builder,
        depths: &[usize; 4],
        channels: &[usize; 4],
        heads: &[usize; 4],
        reductions: &[usize; 4],
        mlp_ratio: usize,
    ) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let patch = if i == 0 { 4 } else { 2 };
            stages.push(TransformerStage::new(
                &b.sub(format!("stage{i}")),
                cin,
                channels[i],
                patch,
                REFERENCE_INPUT / (4 << i),
                depths[i],
                heads[i],
                reductions[i],
                mlp_ratio,
            )?);
            cin = channels[i];
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<Vec<Tensor>> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return config_err(format!("pyramid transformer input {h}x{w} is not divisible by 32"));
        }
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(&x, ctx)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbhvt_tensor::{Array, ParamStore};

    #[test]
    fn single_token_attends_to_itself() {
        let store = ParamStore::new();
        let sra = SpatialReductionAttention::new(&Builder::new(&store, 1), 4, 2, 1).unwrap();
        let x = Tensor::constant(Array::new([1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let out = sra.attend(&x, Grid { h: 1, w: 1 }, &Ctx::eval()).unwrap();
        for w in &out.weights {
            assert_eq!(w.to_vec(), vec![1.0]);
        }
        let v = sra.v.forward(&x).unwrap();
        let want = sra.proj.forward(&v).unwrap();
        assert_eq!(out.output.to_vec(), want.to_vec());
    }

    #[test]
    fn reduced_attention_rows_sum_to_one() {
        let store = ParamStore::new();
        let sra = SpatialReductionAttention::new(&Builder::new(&store, 2), 4, 1, 2).unwrap();
        let x = Tensor::constant(Array::from_fn([16, 4], |i| ((i * 7) % 5) as f64 - 2.0));
        let out = sra.attend(&x, Grid { h: 4, w: 4 }, &Ctx::eval()).unwrap();
        assert_eq!(out.weights[0].shape(), [16, 4]);
        for row in out.weights[0].to_vec().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(sra.attend(&x, Grid { h: 2, w: 8 }, &Ctx::eval()).is_ok());
        let bad = Tensor::constant(Array::zeros([15, 4]));
        assert!(sra.attend(&bad, Grid { h: 3, w: 5 }, &Ctx::eval()).is_err());
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::constant(Array::from_fn([3, 2, 4], |i| i as f64));
        let (t, grid) = map_to_tokens(&x).unwrap();
        assert_eq!(t.shape(), [8, 3]);
        assert_eq!(tokens_to_map(&t, grid).unwrap().to_vec(), x.to_vec());
    }
}
