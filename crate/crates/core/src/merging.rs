//! Channel merging: bottleneck fusion blocks per stage, then a feature
//! pyramid network over the fused stages.

use cbhvt_tensor::nn::{BatchNorm2d, Conv2d};
use cbhvt_tensor::{Builder, Tensor};
use serde::{Deserialize, Serialize};

use crate::ctx::Ctx;
use crate::error::{config_err, Result};
use crate::generators::{FeatureMap, STAGE_STRIDES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalPooling {
    /// 3x3 max pool, stride 1, padding 1.
    Max3x3Stride1,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    /// `(kernel_size, out_channels)`; each conv is followed by BN and ReLU.
    pub layers: Vec<(usize, usize)>,
    pub terminal_pooling: TerminalPooling,
}

impl FusionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return config_err("fusion spec has no layers");
        }
        for &(k, c) in &self.layers {
            if ![1, 3, 5, 7].contains(&k) || c == 0 {
                return config_err(format!("fusion layer ({k}, {c}) needs kernel 1/3/5/7 and positive width"));
            }
        }
        if self.layers.windows(2).any(|w| w[1].1 > w[0].1) {
            return config_err(format!("fusion widths {:?} must be non-increasing", self.layers));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.1)
    }
}

/// Kernel sequence of a named merger; widths are chosen per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergerPreset {
    pub kernels: Vec<usize>,
    pub terminal_pooling: TerminalPooling,
}

impl MergerPreset {
    /// Halves the width per layer, never below `c_out`, ending at `c_out`.
    pub fn spec(&self, c_in: usize, c_out: usize) -> FusionSpec {
        let n = self.kernels.len();
        let layers = self
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let width = if i + 1 == n { c_out } else { (c_in >> (i + 1)).max(c_out) };
                (k, width)
            })
            .collect();
        FusionSpec {
            layers,
            terminal_pooling: self.terminal_pooling,
        }
    }
}

pub const MERGER_TABLE: [(&str, [usize; 3]); 6] = [
    ("Channel Merger-1", [5, 3, 1]),
    ("Channel Merger-2", [5, 3, 1]),
    ("Channel Merger-3", [5, 3, 1]),
    ("Channel Merger-4", [7, 5, 1]),
    ("Channel Merger-5", [3, 3, 1]),
    ("Channel Merger-6", [5, 3, 1]),
];

pub fn merger_presets() -> Vec<(String, MergerPreset)> {
    MERGER_TABLE
        .iter()
        .map(|(name, kernels)| {
            (
                name.to_string(),
                MergerPreset {
                    kernels: kernels.to_vec(),
                    terminal_pooling: TerminalPooling::Max3x3Stride1,
                },
            )
        })
        .collect()
}

pub fn merger_preset(name: &str) -> Result<MergerPreset> {
    merger_presets()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| p)
        .ok_or_else(|| {
            let valid: Vec<&str> = MERGER_TABLE.iter().map(|(n, _)| *n).collect();
            crate::Error::Config(format!("unknown merger preset {name:?}; valid: {}", valid.join(", ")))
        })
}

/// Spatially preserving conv-BN-ReLU chain with optional terminal pooling.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub layers: Vec<(Conv2d, BatchNorm2d)>,
    pub terminal_pooling: TerminalPooling,
}

impl FusionBlock {
    pub fn new(b: &Builder, c_in: usize, spec: &FusionSpec) -> Result<Self> {
        spec.validate()?;
        let mut cin = c_in;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, &(k, c)) in spec.layers.iter().enumerate() {
            let lb = b.sub(format!("layer{i}"));
            layers.push((
                Conv2d::same(&lb.sub("conv"), cin, c, k, false)?,
                BatchNorm2d::new(&lb.sub("bn"), c)?,
            ));
            cin = c;
        }
        Ok(Self {
            layers,
            terminal_pooling: spec.terminal_pooling,
        })
    }

    pub fn forward(&self, level: &FeatureMap, ctx: &Ctx) -> Result<FeatureMap> {
        let mut x = level.tensor.clone();
        for (conv, bn) in &self.layers {
            x = bn.forward(&conv.forward(&x)?, ctx.train)?.relu()?;
        }
        if self.terminal_pooling == TerminalPooling::Max3x3Stride1 {
            x = x.max_pool2d(3, 1, 1)?;
        }
        Ok(FeatureMap {
            tensor: x,
            stride: level.stride,
        })
    }
}

/// Lateral 1x1 projections, a nearest-neighbour top-down pathway and 3x3
/// smoothing, producing a uniform channel count on every level.
#[derive(Debug, Clone)]
pub struct Fpn {
    pub lateral: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
    pub channels: usize,
}

impl Fpn {
    pub fn new(b: &Builder, in_channels: &[usize], c_fpn: usize) -> Result<Self> {
        if c_fpn == 0 || in_channels.is_empty() {
            return config_err("FPN needs at least one level and a positive width");
        }
        Ok(Self {
            lateral: in_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Ok(Conv2d::new(&b.sub(format!("lateral{i}")), c, c_fpn, 1, 1, 0, true)?))
                .collect::<Result<_>>()?,
            smooth: (0..in_channels.len())
                .map(|i| Ok(Conv2d::same(&b.sub(format!("smooth{i}")), c_fpn, c_fpn, 3, true)?))
                .collect::<Result<_>>()?,
            channels: c_fpn,
        })
    }

    pub fn forward(&self, fused: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if fused.len() != self.lateral.len() {
            return config_err(format!("FPN built for {} levels, got {}", self.lateral.len(), fused.len()));
        }
        for (i, f) in fused.iter().enumerate() {
            if f.stride != STAGE_STRIDES[0] << i {
                return config_err(format!("level {i} has stride {}, expected {}", f.stride, STAGE_STRIDES[0] << i));
            }
        }
        let n = fused.len();
        let mut merged: Vec<Option<Tensor>> = vec![None; n];
        let mut above: Option<Tensor> = None;
        for i in (0..n).rev() {
            let lat = self.lateral[i].forward(&fused[i].tensor)?;
            let m = match above {
                Some(up) => {
                    let (h, w) = fused[i].size();
                    lat.add(&up.upsample_nearest(2, h, w)?)?
                }
                None => lat,
            };
            above = Some(m.clone());
            merged[i] = Some(m);
        }
        merged
            .into_iter()
            .zip(&self.smooth)
            .zip(fused)
            .map(|((m, conv), f)| {
                Ok(FeatureMap {
                    tensor: conv.forward(&m.expect("filled top-down"))?,
                    stride: f.stride,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbhvt_tensor::{Array, ParamStore};

    fn zeroed(store: &ParamStore) {
        for p in store.params() {
            p.update(|a| a.data_mut().fill(0.0));
        }
    }

    fn level(c: usize, h: usize, w: usize, stride: usize) -> FeatureMap {
        FeatureMap {
            tensor: Tensor::constant(Array::from_fn([c, h, w], |i| ((i * 7) % 13) as f64 - 6.0)),
            stride,
        }
    }

    #[test]
    fn preset_kernels() {
        assert_eq!(merger_preset("Channel Merger-4").unwrap().kernels, [7, 5, 1]);
        assert_eq!(merger_preset("Channel Merger-5").unwrap().kernels, [3, 3, 1]);
        assert_eq!(merger_preset("Channel Merger-6").unwrap().kernels, [5, 3, 1]);
        assert_eq!(merger_presets().len(), 6);
        assert!(merger_preset("Channel Merger-0").is_err());
    }

    #[test]
    fn fusion_shape_contract_and_zero_weights() {
        let store = ParamStore::new();
        let spec = FusionSpec {
            layers: vec![(5, 32), (3, 16), (1, 8)],
            terminal_pooling: TerminalPooling::Max3x3Stride1,
        };
        let block = FusionBlock::new(&Builder::new(&store, 1), 48, &spec).unwrap();
        let out = block.forward(&level(48, 6, 5, 8), &Ctx::eval()).unwrap();
        assert_eq!((out.tensor.shape(), out.stride), ([8, 6, 5].as_slice(), 8));
        zeroed(&store);
        let out = block.forward(&level(48, 6, 5, 8), &Ctx::eval()).unwrap();
        assert!(out.tensor.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_preset_preserves_spatial_size_on_every_stage() {
        let store = ParamStore::new();
        for (name, preset) in merger_presets() {
            for (i, &stride) in STAGE_STRIDES.iter().enumerate() {
                let size = 64 / stride;
                let spec = preset.spec(32 << i, 16);
                let block = FusionBlock::new(&Builder::new(&store, 1).sub(format!("{name}{i}")), 32 << i, &spec).unwrap();
                let out = block.forward(&level(32 << i, size, size, stride), &Ctx::train()).unwrap();
                assert_eq!(out.tensor.shape(), [16, size, size], "{name} stage {i}");
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let store = ParamStore::new();
        let b = Builder::new(&store, 1);
        let empty = FusionSpec {
            layers: vec![],
            terminal_pooling: TerminalPooling::None,
        };
        assert!(FusionBlock::new(&b, 4, &empty).is_err());
        let widening = FusionSpec {
            layers: vec![(3, 4), (1, 8)],
            terminal_pooling: TerminalPooling::None,
        };
        assert!(widening.validate().is_err());
    }

    #[test]
    fn fpn_uniform_width_and_zero_weights() {
        let store = ParamStore::new();
        let fpn = Fpn::new(&Builder::new(&store, 2), &[8, 16, 32, 64], 16).unwrap();
        let levels: Vec<FeatureMap> = [8, 16, 32, 64]
            .iter()
            .enumerate()
            .map(|(i, &c)| level(c, 16 >> i, 16 >> i, 4 << i))
            .collect();
        let out = fpn.forward(&levels).unwrap();
        for (i, l) in out.iter().enumerate() {
            assert_eq!((l.channels(), l.stride, l.size()), (16, 4 << i, (16 >> i, 16 >> i)));
        }
        zeroed(&store);
        assert!(fpn.forward(&levels).unwrap().iter().all(|l| l.tensor.to_vec().iter().all(|&v| v == 0.0)));
        let mut bad = levels.clone();
        bad[1].stride = 16;
        assert!(fpn.forward(&bad).is_err());
    }
}
