//! Channel exploitation: align every generator's maps per stage, stack them
//! along channels and reweight the stack with channel-spatial attention.

use std::ops::Range;

use cbhvt_tensor::{Builder, Tensor};

use crate::ctx::Ctx;
use crate::error::{config_err, Result};
use crate::generators::{AttentionRefine, FeatureMap, FeaturePyramid};

/// Which member contributed which channels at one level.
pub type Span = (String, Range<usize>);

#[derive(Debug, Clone)]
pub struct BoostedPyramid {
    pub levels: Vec<FeatureMap>,
    pub source_channel_spans: Vec<Vec<Span>>,
}

impl BoostedPyramid {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureMap::channels).collect()
    }
}

/// Resizes each member's map to the first member's grid, then concatenates
/// in member order.
pub fn align_and_concat(pyramids: &[FeaturePyramid], names: &[String]) -> Result<BoostedPyramid> {
    if pyramids.len() < 2 || names.len() != pyramids.len() {
        return config_err(format!(
            "need at least two named pyramids, got {} pyramids and {} names",
            pyramids.len(),
            names.len()
        ));
    }
    let stages = pyramids[0].levels.len();
    if let Some((i, p)) = pyramids.iter().enumerate().find(|(_, p)| p.levels.len() != stages) {
        return config_err(format!(
            "member {} has {} stages, expected {stages}",
            names[i],
            p.levels.len()
        ));
    }
    let mut levels = Vec::with_capacity(stages);
    let mut spans = Vec::with_capacity(stages);
    for s in 0..stages {
        let reference = &pyramids[0].levels[s];
        let (h, w) = reference.size();
        let mut parts = Vec::with_capacity(pyramids.len());
        let mut level_spans = Vec::with_capacity(pyramids.len());
        let mut offset = 0;
        for (p, name) in pyramids.iter().zip(names) {
            let map = &p.levels[s];
            let t = if map.size() == (h, w) { map.tensor.clone() } else { map.tensor.resize_bilinear(h, w)? };
            level_spans.push((name.clone(), offset..offset + map.channels()));
            offset += map.channels();
            parts.push(t);
        }
        levels.push(FeatureMap {
            tensor: Tensor::concat(&parts, 0)?,
            stride: reference.stride,
        });
        spans.push(level_spans);
    }
    Ok(BoostedPyramid {
        levels,
        source_channel_spans: spans,
    })
}

/// Independent attention refinement per pyramid level.
#[derive(Debug, Clone)]
pub struct Exploiter {
    pub attention: Vec<AttentionRefine>,
}

impl Exploiter {
    pub fn new(b: &Builder, level_channels: &[usize], reduction: usize) -> Result<Self> {
        Ok(Self {
            attention: level_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| AttentionRefine::new(&b.sub(format!("level{i}")), c, reduction))
                .collect::<Result<_>>()?,
        })
    }

    pub fn exploit(&self, boosted: &BoostedPyramid, ctx: &Ctx) -> Result<BoostedPyramid> {
        if boosted.levels.len() != self.attention.len() {
            return config_err(format!(
                "exploiter built for {} levels, got {}",
                self.attention.len(),
                boosted.levels.len()
            ));
        }
        let levels = boosted
            .levels
            .iter()
            .zip(&self.attention)
            .map(|(level, att)| {
                Ok(FeatureMap {
                    tensor: att.forward(&level.tensor, ctx)?,
                    stride: level.stride,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoostedPyramid {
            levels,
            source_channel_spans: boosted.source_channel_spans.clone(),
        })
    }
}
