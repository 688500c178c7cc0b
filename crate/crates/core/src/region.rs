//! Region-aware machinery: anchors, the proposal network, box coding,
//! non-maximum suppression, target assignment and ROI Align.

use cbhvt_tensor::nn::Conv2d;
use cbhvt_tensor::{Array, Builder, Init, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::generators::FeatureMap;

/// Axis-aligned box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Finite with positive extent.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
}

/// Spatial extent and stride of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl From<&FeatureMap> for LevelShape {
    fn from(f: &FeatureMap) -> Self {
        let (h, w) = f.size();
        Self { h, w, stride: f.stride }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<Vec<BBox>>,
    pub shapes: Vec<LevelShape>,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorSet {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<BBox> {
        self.levels.concat()
    }
}

/// One anchor per (cell, scale, ratio), cell-major, centered on the cell.
pub fn generate_anchors(shapes: &[LevelShape], scales: &[f64], ratios: &[f64]) -> Result<AnchorSet> {
    if scales.is_empty() || ratios.is_empty() {
        return config_err("anchors need at least one scale and one ratio");
    }
    if let Some(bad) = scales.iter().chain(ratios).find(|v| !(**v > 0.0 && v.is_finite())) {
        return config_err(format!("anchor scales and ratios must be positive, got {bad}"));
    }
    let levels = shapes
        .iter()
        .map(|s| {
            let mut v = Vec::with_capacity(s.h * s.w * scales.len() * ratios.len());
            let st = s.stride as f64;
            for i in 0..s.h {
                for j in 0..s.w {
                    let (cx, cy) = (st * (j as f64 + 0.5), st * (i as f64 + 0.5));
                    for &scale in scales {
                        for &r in ratios {
                            v.push(BBox::from_center(cx, cy, scale * r.sqrt(), scale / r.sqrt()));
                        }
                    }
                }
            }
            v
        })
        .collect();
    Ok(AnchorSet {
        levels,
        shapes: shapes.to_vec(),
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
    })
}

/// Largest log-scale change a decoded delta may apply.
pub const MAX_DELTA_LOG: f64 = 4.0;

pub fn decode_box(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    BBox::from_center(
        acx + d[0] * aw,
        acy + d[1] * ah,
        aw * d[2].min(MAX_DELTA_LOG).exp(),
        ah * d[3].min(MAX_DELTA_LOG).exp(),
    )
}

/// Applies deltas to anchors and clips the results to the image.
pub fn decode_boxes(anchors: &[BBox], deltas: &[[f64; 4]], image_w: f64, image_h: f64) -> Vec<BBox> {
    anchors
        .iter()
        .zip(deltas)
        .map(|(a, d)| decode_box(a, d).clip(image_w, image_h))
        .collect()
}

/// Inverse of [`decode_box`] (without clipping).
pub fn encode_box(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression: a box is dropped when its IoU with an already kept,
/// higher-ranked box exceeds `iou_threshold`. Returns kept indices in rank order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let order = rank_by_score(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[k + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
    /// Best-overlapping ground truth per anchor (`None` without ground truth).
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
    /// Encoding of the matched ground truth against the anchor.
    pub targets: Vec<[f64; 4]>,
}

impl Assignment {
    pub fn positives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Negative)
    }

    fn indices(&self, label: AnchorLabel) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == label).map(|(i, _)| i).collect()
    }
}

/// Positive when IoU reaches `pos_iou` or the anchor is (one of) the best
/// anchors for some ground truth; negative below `neg_iou`; otherwise ignored.
pub fn assign_targets(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Result<Assignment> {
    if pos_iou < neg_iou {
        return config_err(format!("positive IoU {pos_iou} is below negative IoU {neg_iou}"));
    }
    let n = anchors.len();
    let mut matched = vec![None; n];
    let mut max_iou = vec![0.0; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    let mut ious = vec![0.0; n * gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = a.iou(gt);
            ious[i * gts.len() + g] = v;
            if matched[i].is_none() || v > max_iou[i] {
                max_iou[i] = v;
                matched[i] = Some(g);
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let is_best = (0..gts.len()).any(|g| gt_best[g] > 0.0 && ious[i * gts.len() + g] == gt_best[g]);
        let label = if matched[i].is_some() && (max_iou[i] >= pos_iou || is_best) {
            AnchorLabel::Positive
        } else if max_iou[i] < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        labels.push(label);
        targets.push(match (label, matched[i]) {
            (AnchorLabel::Positive, Some(g)) => encode_box(&gts[g], &anchors[i]),
            _ => [0.0; 4],
        });
    }
    Ok(Assignment {
        labels,
        matched,
        max_iou,
        targets,
    })
}

/// Shared 3x3 conv + ReLU with sibling 1x1 objectness and delta convs,
/// applied to every level.
#[derive(Debug, Clone)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub anchors_per_cell: usize,
}

/// Per-anchor outputs in [`generate_anchors`] order.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `[N]` objectness logits.
    pub logits: Tensor,
    /// `[N, 4]` box deltas.
    pub deltas: Tensor,
}

impl RpnHead {
    pub fn new(b: &Builder, channels: usize, anchors_per_cell: usize) -> Result<Self> {
        let small = Init::Normal { std: 0.01 };
        Ok(Self {
            conv: Conv2d::same(&b.sub("conv"), channels, channels, 3, true)?,
            cls: Conv2d::with_init(&b.sub("cls"), channels, anchors_per_cell, 1, 1, 0, true, small)?,
            reg: Conv2d::with_init(&b.sub("reg"), channels, 4 * anchors_per_cell, 1, 1, 0, true, small)?,
            anchors_per_cell,
        })
    }

    pub fn forward(&self, levels: &[FeatureMap], anchors: &AnchorSet) -> Result<RpnOutput> {
        let a = self.anchors_per_cell;
        if anchors.per_cell() != a || anchors.levels.len() != levels.len() {
            return config_err(format!(
                "anchor set ({} levels, {} per cell) does not match RPN ({} levels, {a} per cell)",
                anchors.levels.len(),
                anchors.per_cell(),
                levels.len()
            ));
        }
        let mut logits = Vec::with_capacity(levels.len());
        let mut deltas = Vec::with_capacity(levels.len());
        for (level, shape) in levels.iter().zip(&anchors.shapes) {
            let (h, w) = level.size();
            if (h, w, level.stride) != (shape.h, shape.w, shape.stride) {
                return config_err(format!(
                    "level {h}x{w}/{} does not match anchors {}x{}/{}",
                    level.stride, shape.h, shape.w, shape.stride
                ));
            }
            let t = self.conv.forward(&level.tensor)?.relu()?;
            logits.push(self.cls.forward(&t)?.permute(&[1, 2, 0])?.reshape(&[h * w * a])?);
            deltas.push(
                self.reg
                    .forward(&t)?
                    .reshape(&[a, 4, h, w])?
                    .permute(&[2, 3, 0, 1])?
                    .reshape(&[h * w * a, 4])?,
            );
        }
        Ok(RpnOutput {
            logits: Tensor::concat(&logits, 0)?,
            deltas: Tensor::concat(&deltas, 0)?,
        })
    }
}

/// ROI Align on one level: boxes map to the level by dividing by its stride.
pub fn roi_align(level: &FeatureMap, boxes: &[BBox], output: (usize, usize), sampling_ratio: usize) -> Result<Tensor> {
    let raw: Vec<[f64; 4]> = boxes.iter().map(|b| b.to_array()).collect();
    Ok(level
        .tensor
        .roi_align(&raw, 1.0 / level.stride as f64, output.0, output.1, sampling_ratio)?)
}

/// Pyramid level for a box: `floor(log2(sqrt(area) / 56) + 4)`, offset so
/// that 2 is the finest level, clamped to the available levels.
pub fn pyramid_level(b: &BBox, levels: usize) -> usize {
    let k = ((b.area().sqrt() / 56.0).log2() + 4.0).floor();
    let idx = if k.is_finite() { k - 2.0 } else { 0.0 };
    idx.clamp(0.0, (levels.max(1) - 1) as f64) as usize
}

/// ROI Align with each box pooled from its assigned level. Output rows
/// follow `boxes` order.
pub fn roi_align_pyramid(
    levels: &[FeatureMap],
    boxes: &[BBox],
    output: (usize, usize),
    sampling_ratio: usize,
) -> Result<Tensor> {
    let c = levels.first().map_or(0, FeatureMap::channels);
    if boxes.is_empty() {
        return Ok(Tensor::constant(Array::zeros([0, c, output.0, output.1])));
    }
    let assigned: Vec<usize> = boxes.iter().map(|b| pyramid_level(b, levels.len())).collect();
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(boxes.len());
    for (l, level) in levels.iter().enumerate() {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| assigned[i] == l).collect();
        if idx.is_empty() {
            continue;
        }
        let group: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
        parts.push(roi_align(level, &group, output, sampling_ratio)?);
        order.extend(idx);
    }
    let stacked = if parts.len() == 1 { parts.pop().expect("one part") } else { Tensor::concat(&parts, 0)? };
    if order.iter().enumerate().all(|(k, &i)| k == i) {
        return Ok(stacked);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    Ok(stacked.index_select(&inverse)?)
}

/// Top `pre_nms_k` valid boxes by objectness, NMS, then the best `post_nms_k`.
pub fn select_proposals(
    boxes: &[BBox],
    objectness: &[f64],
    pre_nms_k: usize,
    post_nms_k: usize,
    iou_threshold: f64,
) -> Vec<Proposal> {
    let mut ranked: Vec<usize> = rank_by_score(objectness)
        .into_iter()
        .filter(|&i| boxes[i].is_valid())
        .collect();
    ranked.truncate(pre_nms_k);
    let cand: Vec<BBox> = ranked.iter().map(|&i| boxes[i]).collect();
    let scores: Vec<f64> = ranked.iter().map(|&i| objectness[i]).collect();
    nms(&cand, &scores, iou_threshold)
        .into_iter()
        .take(post_nms_k)
        .map(|k| Proposal {
            bbox: cand[k],
            objectness: scores[k],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbhvt_tensor::ParamStore;

    #[test]
    fn anchor_counts_and_first_center() {
        let shape = [LevelShape { h: 8, w: 8, stride: 4 }];
        let one = generate_anchors(&shape, &[8.0], &[1.0]).unwrap();
        assert_eq!(one.len(), 64);
        assert_eq!(one.levels[0][0].center(), (2.0, 2.0));
        assert_eq!(generate_anchors(&shape, &[8.0, 16.0, 32.0], &[1.0]).unwrap().len(), 192);
        assert!(generate_anchors(&shape, &[0.0], &[1.0]).is_err());
        assert!(generate_anchors(&shape, &[8.0], &[]).is_err());
    }

    #[test]
    fn decode_zero_and_doubling_deltas() {
        let a = BBox::new(10.0, 20.0, 30.0, 60.0);
        assert_eq!(decode_box(&a, &[0.0; 4]), a);
        let d = decode_box(&a, &[0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.width() - 40.0).abs() < 1e-12);
        assert_eq!(d.center(), a.center());
        let huge = decode_box(&a, &[0.0, 0.0, 100.0, 0.0]);
        assert!((huge.width() - 20.0 * MAX_DELTA_LOG.exp()).abs() < 1e-9);
    }

    #[test]
    fn nms_small_cases() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b], &[0.3], 0.5), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
        assert_eq!(nms(&[b, b], &[0.9, 0.9], 0.5), vec![0]);
    }

    #[test]
    fn nms_is_permutation_invariant_for_distinct_scores() {
        let boxes: Vec<BBox> = (0..12).map(|i| BBox::new(i as f64 * 3.0, 0.0, i as f64 * 3.0 + 8.0, 8.0)).collect();
        let scores: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 / 12.0).collect();
        let kept: Vec<BBox> = nms(&boxes, &scores, 0.3).into_iter().map(|i| boxes[i]).collect();
        let perm: Vec<usize> = (0..12).rev().collect();
        let (pb, ps): (Vec<BBox>, Vec<f64>) = perm.iter().map(|&i| (boxes[i], scores[i])).unzip();
        let kept2: Vec<BBox> = nms(&pb, &ps, 0.3).into_iter().map(|i| pb[i]).collect();
        assert_eq!(kept, kept2);
    }

    #[test]
    fn assignment_trivial_cases() {
        let anchors = [BBox::new(0.0, 0.0, 8.0, 8.0), BBox::new(40.0, 40.0, 48.0, 48.0)];
        let a = assign_targets(&anchors, &[anchors[0]], 0.7, 0.3).unwrap();
        assert_eq!(a.labels, vec![AnchorLabel::Positive, AnchorLabel::Negative]);
        assert_eq!(a.targets[0], [0.0; 4]);
        let none = assign_targets(&anchors, &[], 0.7, 0.3).unwrap();
        assert!(none.labels.iter().all(|l| *l == AnchorLabel::Negative));
        assert!(assign_targets(&anchors, &[], 0.3, 0.7).is_err());
    }

    #[test]
    fn rpn_zero_weights_give_neutral_outputs() {
        let store = ParamStore::new();
        let rpn = RpnHead::new(&Builder::new(&store, 1), 4, 3).unwrap();
        for p in store.params() {
            p.update(|a| a.data_mut().fill(0.0));
        }
        let shapes = [LevelShape { h: 4, w: 4, stride: 4 }, LevelShape { h: 2, w: 2, stride: 8 }];
        let anchors = generate_anchors(&shapes, &[8.0, 16.0, 32.0], &[1.0]).unwrap();
        let levels: Vec<FeatureMap> = shapes
            .iter()
            .map(|s| FeatureMap {
                tensor: Tensor::constant(Array::full([4, s.h, s.w], 0.7)),
                stride: s.stride,
            })
            .collect();
        let out = rpn.forward(&levels, &anchors).unwrap();
        assert_eq!(out.logits.shape(), [anchors.len()]);
        assert_eq!(out.deltas.shape(), [anchors.len(), 4]);
        assert!(out.logits.to_vec().iter().chain(&out.deltas.to_vec()).all(|&v| v == 0.0));
    }

    #[test]
    fn roi_align_constant_map_and_whole_map() {
        let level = FeatureMap {
            tensor: Tensor::constant(Array::full([2, 8, 8], 3.5)),
            stride: 4,
        };
        let out = roi_align(&level, &[BBox::new(3.0, 5.0, 17.3, 29.0), BBox::new(7.0, 7.0, 7.0, 7.0)], (7, 7), 2).unwrap();
        assert!(out.to_vec().iter().all(|&v| (v - 3.5).abs() < 1e-12));

        let map = Array::from_fn([1, 4, 4], |i| i as f64);
        let level = FeatureMap {
            tensor: Tensor::constant(map.clone()),
            stride: 4,
        };
        let whole = roi_align(&level, &[BBox::new(0.0, 0.0, 16.0, 16.0)], (4, 4), 1).unwrap();
        assert_eq!(whole.to_vec(), map.data());
    }

    #[test]
    fn level_rule_clamps() {
        assert_eq!(pyramid_level(&BBox::new(0.0, 0.0, 8.0, 8.0), 4), 0);
        assert_eq!(pyramid_level(&BBox::new(0.0, 0.0, 112.0, 112.0), 4), 3);
        assert_eq!(pyramid_level(&BBox::new(0.0, 0.0, 56.0, 56.0), 4), 2);
        assert_eq!(pyramid_level(&BBox::new(0.0, 0.0, 1000.0, 1000.0), 4), 3);
    }

    #[test]
    fn proposals_respect_k_and_bounds() {
        let boxes: Vec<BBox> = (0..5).map(|i| BBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0)).collect();
        let all = select_proposals(&boxes, &[0.1, 0.5, 0.3, 0.9, 0.2], 10, 10, 0.7);
        assert_eq!(all.len(), 5);
        assert_eq!(all[0].bbox, boxes[3]);
        assert_eq!(select_proposals(&boxes, &[0.1; 5], 10, 2, 0.7).len(), 2);
    }
}
