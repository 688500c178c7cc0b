use cbhvt_tensor::nn::{BatchNorm2d, Conv2d, ConvTranspose2d};
use cbhvt_tensor::{Builder, Tensor};

use crate::ctx::Ctx;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(b: &Builder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&b.sub("conv"), cin, cout, 3, stride, 1, false)?,
            bn: BatchNorm2d::new(&b.sub("bn"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, ctx.train)?.relu()?)
    }
}

/// Convolutional autoencoder. The encoder is a stride-2 stem and four
/// stride-2 stages; the decoder mirrors it with transposed convolutions
/// and is only built for reconstruction pretraining.
#[derive(Debug, Clone)]
pub struct ConvAutoencoder {
    pub stem: ConvBnRelu,
    pub stages: Vec<Vec<ConvBnRelu>>,
    pub decoder: Option<Vec<ConvTranspose2d>>,
}

impl ConvAutoencoder {
    pub fn new(b: &Builder, depths: &[usize; 4], channels: &[usize; 4]) -> Result<Self> {
        let stem_c = (channels[0] / 2).max(1);
        let stem = ConvBnRelu::new(&b.sub("stem"), 3, stem_c, 2)?;
        let mut cin = stem_c;
        let mut stages = Vec::with_capacity(4);
        for (i, (&depth, &cout)) in depths.iter().zip(channels).enumerate() {
            let sb = b.sub(format!("stage{i}"));
            let layers = (0..depth.max(1))
                .map(|j| {
                    let (c, s) = if j == 0 { (cin, 2) } else { (cout, 1) };
                    ConvBnRelu::new(&sb.sub(format!("layer{j}")), c, cout, s)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(layers);
            cin = cout;
        }
        Ok(Self {
            stem,
            stages,
            decoder: None,
        })
    }

    /// Adds the mirrored decoder (stride 32 back to full resolution).
    pub fn attach_decoder(&mut self, b: &Builder) -> Result<()> {
        let mut widths: Vec<usize> = self.stages.iter().map(|s| s[0].bn.gamma.shape()[0]).collect();
        widths.insert(0, self.stem.bn.gamma.shape()[0]);
        widths.insert(0, 3);
        let layers = (1..widths.len())
            .rev()
            .map(|i| Ok(ConvTranspose2d::new(&b.sub(format!("up{i}")), widths[i], widths[i - 1], 4, 2, 1, true)?))
            .collect::<Result<Vec<_>>>()?;
        self.decoder = Some(layers);
        Ok(())
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<Vec<Tensor>> {
        let mut x = self.stem.forward(image, ctx)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for layer in stage {
                x = layer.forward(&x, ctx)?;
            }
            outs.push(x.clone());
        }
        Ok(outs)
    }

    /// Encodes then decodes; requires [`attach_decoder`](Self::attach_decoder).
    pub fn reconstruct(&self, image: &Tensor, ctx: &Ctx) -> Result<Option<Tensor>> {
        let Some(decoder) = &self.decoder else { return Ok(None) };
        let mut x = self.forward(image, ctx)?.pop().expect("four stages");
        for (i, up) in decoder.iter().enumerate() {
            x = up.forward(&x)?;
            x = if i + 1 < decoder.len() { x.relu()? } else { x.sigmoid()? };
        }
        Ok(Some(x))
    }
}
