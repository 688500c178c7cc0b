use cbhvt_tensor::nn::{BatchNorm2d, Conv2d};
use cbhvt_tensor::{Builder, Tensor};

use super::attention::AttentionRefine;
use crate::ctx::Ctx;
use crate::error::Result;

/// `ReLU(shortcut(x) + F(x))` with `F = conv-BN-ReLU-conv-BN`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: Option<BatchNorm2d>,
    pub conv2: Conv2d,
    pub bn2: Option<BatchNorm2d>,
    /// 1x1 projection, present when channels or stride change.
    pub shortcut: Option<(Conv2d, Option<BatchNorm2d>)>,
}

impl ResidualBlock {
    pub fn new(b: &Builder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Self::with_norm(b, cin, cout, stride, true)
    }

    /// Without batch norm the convolutions carry biases instead.
    pub fn with_norm(b: &Builder, cin: usize, cout: usize, stride: usize, use_bn: bool) -> Result<Self> {
        let bn = |name: &str, c: usize| -> Result<Option<BatchNorm2d>> {
            Ok(if use_bn { Some(BatchNorm2d::new(&b.sub(name), c)?) } else { None })
        };
        let shortcut = if cin != cout || stride != 1 {
            Some((
                Conv2d::new(&b.sub("proj"), cin, cout, 1, stride, 0, !use_bn)?,
                bn("proj_bn", cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&b.sub("conv1"), cin, cout, 3, stride, 1, !use_bn)?,
            bn1: bn("bn1", cout)?,
            conv2: Conv2d::new(&b.sub("conv2"), cout, cout, 3, 1, 1, !use_bn)?,
            bn2: bn("bn2", cout)?,
            shortcut,
        })
    }

    /// The residual branch `F(x)`.
    pub fn branch(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut h = self.conv1.forward(x)?;
        if let Some(bn) = &self.bn1 {
            h = bn.forward(&h, ctx.train)?;
        }
        h = self.conv2.forward(&h.relu()?)?;
        if let Some(bn) = &self.bn2 {
            h = bn.forward(&h, ctx.train)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let f = self.branch(x, ctx)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x)?;
                match bn {
                    Some(bn) => bn.forward(&s, ctx.train)?,
                    None => s,
                }
            }
            None => x.clone(),
        };
        Ok(skip.add(&f)?.relu()?)
    }
}

/// Residual backbone: a stride-4 stem followed by four stages of blocks,
/// optionally refining each stage output with channel-spatial attention.
#[derive(Debug, Clone)]
pub struct ResNet {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub attention: Vec<AttentionRefine>,
}

impl ResNet {
    pub fn new(
        b: &Builder,
        depths: &[usize; 4],
        channels: &[usize; 4],
        attention_ratio: Option<usize>,
    ) -> Result<Self> {
        let stem = Conv2d::new(&b.sub("stem"), 3, channels[0], 7, 2, 3, false)?;
        let stem_bn = BatchNorm2d::new(&b.sub("stem_bn"), channels[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut attention = Vec::new();
        let mut cin = channels[0];
        for (i, (&depth, &cout)) in depths.iter().zip(channels).enumerate() {
            let sb = b.sub(format!("stage{i}"));
            let blocks = (0..depth)
                .map(|j| {
                    let stride = if j == 0 && i > 0 { 2 } else { 1 };
                    let c = if j == 0 { cin } else { cout };
                    ResidualBlock::new(&sb.sub(format!("block{j}")), c, cout, stride)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if let Some(r) = attention_ratio {
                attention.push(AttentionRefine::new(&sb.sub("attention"), cout, r)?);
            }
            cin = cout;
        }
        Ok(Self {
            stem,
            stem_bn,
            stages,
            attention,
        })
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<Vec<Tensor>> {
        let x = self.stem_bn.forward(&self.stem.forward(image)?, ctx.train)?.relu()?;
        let mut x = x.max_pool2d(3, 2, 1)?;
        let mut outs = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(&x, ctx)?;
            }
            if let Some(att) = self.attention.get(i) {
                x = att.forward(&x, ctx)?;
            }
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
    fn zero_input_with_branch_bias_gives_relu_of_bias() {
        let store = ParamStore::new();
        let block = ResidualBlock::with_norm(&Builder::new(&store, 1).sub("b"), 2, 2, 1, false).unwrap();
        for p in store.params() {
            p.update(|a| a.data_mut().fill(0.0));
        }
        store.get("b.conv2.bias").unwrap().set_value(Array::from_vec(vec![0.7, -0.4])).unwrap();
        let y = block.forward(&Tensor::constant(Array::zeros([2, 3, 3])), &Ctx::eval()).unwrap();
        let v = y.to_vec();
        assert!(v[..9].iter().all(|&x| x == 0.7));
        assert!(v[9..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_only_when_shapes_change() {
        let store = ParamStore::new();
        let b = Builder::new(&store, 1);
        assert!(ResidualBlock::new(&b.sub("same"), 4, 4, 1).unwrap().shortcut.is_none());
        assert!(ResidualBlock::new(&b.sub("wide"), 4, 8, 1).unwrap().shortcut.is_some());
        assert!(ResidualBlock::new(&b.sub("down"), 4, 4, 2).unwrap().shortcut.is_some());
    }
}
