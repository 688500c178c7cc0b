//! Detection and segmentation heads, the training losses and
//! post-processing into final detections.

use cbhvt_tensor::nn::{Conv2d, ConvTranspose2d, Linear};
use cbhvt_tensor::ops::Stencil;
use cbhvt_tensor::{Array, Builder, Init, Tensor};
use serde::{Deserialize, Serialize};

use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::region::{decode_box, nms, BBox};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;
pub const BACKGROUND: usize = 0;
pub const LYMPHOCYTE: usize = 1;
pub const MASK_SIZE: usize = 28;

/// Two fully connected layers followed by sibling class and box outputs.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub bbox: Linear,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// `[R, K+1]`, rows sum to one.
    pub class_probs: Tensor,
    /// `[R, 4 (K+1)]`, one delta quadruple per class.
    pub box_deltas: Tensor,
}

impl DetectionHead {
    pub fn new(b: &Builder, in_features: usize, width: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.sub("fc1"), in_features, width)?,
            fc2: Linear::new(&b.sub("fc2"), width, width)?,
            cls: Linear::with_init(&b.sub("cls"), width, num_classes, Init::Normal { std: 0.01 })?,
            bbox: Linear::with_init(&b.sub("bbox"), width, 4 * num_classes, Init::Normal { std: 0.001 })?,
            num_classes,
        })
    }

    pub fn forward(&self, roi_features: &Tensor, ctx: &Ctx) -> Result<DetectionOutput> {
        let r = roi_features.shape()[0];
        let flat = roi_features.reshape(&[r, roi_features.len() / r.max(1)])?;
        let h = self.fc2.forward(&self.fc1.forward(&flat)?.relu()?)?.relu()?;
        let class_probs = self.cls.forward(&h)?.softmax(1)?;
        ctx.record_softmax(&class_probs);
        Ok(DetectionOutput {
            class_probs,
            box_deltas: self.bbox.forward(&h)?,
        })
    }
}

/// Two 3x3 conv+ReLU layers, a 2x transposed-conv upsample and a 1x1 conv
/// to per-class mask logits.
#[derive(Debug, Clone)]
pub struct SegmentationHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub up: ConvTranspose2d,
    pub logits: Conv2d,
}

impl SegmentationHead {
    pub fn new(b: &Builder, channels: usize, width: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::same(&b.sub("conv1"), channels, width, 3, true)?,
            conv2: Conv2d::same(&b.sub("conv2"), width, width, 3, true)?,
            up: ConvTranspose2d::new(&b.sub("up"), width, width, 2, 2, 0, true)?,
            logits: Conv2d::new(&b.sub("logits"), width, num_classes, 1, 1, 0, true)?,
        })
    }

    /// `[R, C, 14, 14]` to `[R, K+1, 28, 28]` logits.
    pub fn forward(&self, roi_features: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(roi_features)?.relu()?;
        let h = self.conv2.forward(&h)?.relu()?;
        let h = self.up.forward(&h)?.relu()?;
        Ok(self.logits.forward(&h)?)
    }
}

// Scalar forms of the losses.

pub fn loss_cross_entropy(p: &[f64], y: usize) -> Result<f64> {
    let &py = p
        .get(y)
        .ok_or_else(|| Error::InvalidInput(format!("class {y} out of range for {} classes", p.len())))?;
    Ok(-py.clamp(PROB_CLAMP, 1.0).ln())
}

/// Mean over rows of the summed absolute coordinate differences.
pub fn loss_l1(t: &[[f64; 4]], t_star: &[[f64; 4]]) -> Result<f64> {
    if t.len() != t_star.len() {
        return Err(Error::InvalidInput(format!("{} predictions vs {} targets", t.len(), t_star.len())));
    }
    if t.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = t
        .iter()
        .zip(t_star)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(s / t.len() as f64)
}

pub fn loss_bce(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::InvalidInput(format!("{} probabilities vs {} targets", p.len(), y.len())));
    }
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / p.len() as f64)
}

// Differentiable forms.

/// Mean of `-ln p[y]` over rows of `[R, K]` probabilities.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(probs.pick(labels)?.clamp(PROB_CLAMP, 1.0)?.ln()?.neg()?.mean_all()?)
}

/// Summed absolute differences over `[N, 4]` rows, divided by `N`.
pub fn l1(pred: &Tensor, target: &Array) -> Result<Tensor> {
    let n = pred.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Ok(Tensor::constant(Array::scalar(0.0)));
    }
    Ok(pred
        .sub(&Tensor::constant(target.clone()))?
        .abs()?
        .sum_all()?
        .mul_scalar(1.0 / n as f64)?)
}

/// Mean binary cross-entropy of probabilities against 0/1 targets.
pub fn bce(probs: &Tensor, target: &Array) -> Result<Tensor> {
    if probs.shape() != target.shape() {
        return Err(Error::InvalidInput(format!("bce shapes {:?} vs {:?}", probs.shape(), target.shape())));
    }
    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let y = Tensor::constant(target.clone());
    let not_y = Tensor::constant(target.map(|v| 1.0 - v));
    let ll = y.mul(&p.ln()?)?.add(&not_y.mul(&p.rsub_scalar(1.0)?.ln()?)?)?;
    Ok(ll.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_l: f64,
    pub l_b: f64,
    pub total: f64,
}

/// `total = l_c + l_l + l_b`; rejects non-finite or negative components.
pub fn total_loss(l_c: f64, l_l: f64, l_b: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_c", l_c), ("l_l", l_l), ("l_b", l_b)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
        if v < 0.0 {
            return Err(Error::Numeric(format!("{name} loss is negative ({v})")));
        }
    }
    Ok(LossBreakdown {
        l_c,
        l_l,
        l_b,
        total: l_c + l_l + l_b,
    })
}

/// Binary mask over the integer pixel window enclosing a box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl InstanceMask {
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
    pub mask: Option<InstanceMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub mask_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            mask_threshold: 0.5,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

/// A scored box selected from a particular ROI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub roi: usize,
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
}

/// Per-class decoding, score filtering and per-class NMS. Results are
/// ordered by descending score.
pub fn select_detections(
    proposals: &[BBox],
    class_probs: &Array,
    box_deltas: &Array,
    image_size: (f64, f64),
    cfg: &PostprocessConfig,
) -> Vec<Selected> {
    let k = class_probs.shape().get(1).copied().unwrap_or(0);
    let mut out = Vec::new();
    for class in 1..k {
        let mut cand = Vec::new();
        for (r, p) in proposals.iter().enumerate() {
            let score = class_probs.data()[r * k + class];
            if score < cfg.score_threshold {
                continue;
            }
            let d = &box_deltas.data()[(r * k + class) * 4..(r * k + class + 1) * 4];
            let b = decode_box(p, &[d[0], d[1], d[2], d[3]]).clip(image_size.0, image_size.1);
            if b.is_valid() {
                cand.push(Selected {
                    roi: r,
                    bbox: b,
                    label: class,
                    score,
                });
            }
        }
        let boxes: Vec<BBox> = cand.iter().map(|c| c.bbox).collect();
        let scores: Vec<f64> = cand.iter().map(|c| c.score).collect();
        out.extend(nms(&boxes, &scores, cfg.nms_threshold).into_iter().map(|i| cand[i]));
    }
    let scores: Vec<f64> = out.iter().map(|s| s.score).collect();
    let mut ranked: Vec<Selected> = crate::region::rank_by_score(&scores).into_iter().map(|i| out[i]).collect();
    ranked.truncate(cfg.max_detections);
    ranked
}

/// Resamples an `m x m` probability grid covering `bbox` onto the enclosing
/// pixel window and thresholds it.
pub fn paste_mask(probs: &[f64], m: usize, bbox: &BBox, threshold: f64) -> InstanceMask {
    let x0 = bbox.x1.floor().max(0.0) as usize;
    let y0 = bbox.y1.floor().max(0.0) as usize;
    let width = (bbox.x2.ceil() as usize).saturating_sub(x0).max(1);
    let height = (bbox.y2.ceil() as usize).saturating_sub(y0).max(1);
    let (bw, bh) = (bbox.width().max(1e-9), bbox.height().max(1e-9));
    let mut data = vec![0u8; width * height];
    for py in 0..height {
        let v = ((y0 + py) as f64 + 0.5 - bbox.y1) / bh * m as f64 - 0.5;
        if !(-0.5..=m as f64 - 0.5).contains(&v) {
            continue;
        }
        let sy = Stencil::new(v, m);
        for px in 0..width {
            let u = ((x0 + px) as f64 + 0.5 - bbox.x1) / bw * m as f64 - 0.5;
            if !(-0.5..=m as f64 - 0.5).contains(&u) {
                continue;
            }
            let sx = Stencil::new(u, m);
            let at = |i: usize, j: usize| probs[i * m + j];
            let p = (1.0 - sy.w) * ((1.0 - sx.w) * at(sy.i0, sx.i0) + sx.w * at(sy.i0, sx.i1))
                + sy.w * ((1.0 - sx.w) * at(sy.i1, sx.i0) + sx.w * at(sy.i1, sx.i1));
            if p >= threshold {
                data[py * width + px] = 1;
            }
        }
    }
    InstanceMask {
        x0,
        y0,
        width,
        height,
        data,
    }
}

/// Per-ROI head outputs.
#[derive(Debug, Clone)]
pub struct RoiOutputs {
    pub proposals: Vec<BBox>,
    /// `[R, K+1]`.
    pub class_probs: Array,
    /// `[R, 4 (K+1)]`.
    pub box_deltas: Array,
    /// `[R, K+1, m, m]` logits, when masks are wanted.
    pub mask_logits: Option<Array>,
}

/// Decode, filter, suppress, then binarize masks into box-local grids.
pub fn postprocess(outputs: &RoiOutputs, image_size: (f64, f64), cfg: &PostprocessConfig) -> Vec<Detection> {
    let selected = select_detections(&outputs.proposals, &outputs.class_probs, &outputs.box_deltas, image_size, cfg);
    selected
        .into_iter()
        .map(|s| {
            let mask = outputs.mask_logits.as_ref().map(|logits| {
                let (k, m) = (logits.shape()[1], logits.shape()[2]);
                let base = (s.roi * k + s.label) * m * m;
                let probs: Vec<f64> = logits.data()[base..base + m * m]
                    .iter()
                    .map(|&z| cbhvt_tensor::ops::sigmoid(z))
                    .collect();
                paste_mask(&probs, m, &s.bbox, cfg.mask_threshold)
            });
            Detection {
                bbox: s.bbox,
                label: s.label,
                score: s.score,
                mask,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbhvt_tensor::ParamStore;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(loss_cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!(close(loss_cross_entropy(&[0.5, 0.5], 0).unwrap(), 0.693147));
        assert!(close(loss_cross_entropy(&[0.25; 4], 2).unwrap(), 1.386294));
        assert!(loss_cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(close(loss_cross_entropy(&[1.0, 0.0], 1).unwrap(), -(PROB_CLAMP.ln())));
    }

    #[test]
    fn l1_examples() {
        let t = [[1.0, 2.0, 3.0, 4.0], [0.0; 4]];
        assert_eq!(loss_l1(&t, &t).unwrap(), 0.0);
        let s = [[1.5, 2.5, 3.0, 4.0], [0.5, -0.5, 0.5, -0.5]];
        assert_eq!(loss_l1(&t, &s).unwrap(), 1.5);
        assert_eq!(loss_l1(&[], &[]).unwrap(), 0.0);
        assert!(loss_l1(&t, &s[..1]).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!(loss_bce(&[1.0], &[1.0]).unwrap() < 1e-11);
        assert!(close(loss_bce(&[0.5], &[1.0]).unwrap(), 0.693147));
        assert!(close(loss_bce(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 0.105361));
        assert!(loss_bce(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn tensor_losses_agree_with_scalar_forms() {
        let probs = Array::new([2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let ce = cross_entropy(&Tensor::constant(probs.clone()), &[1, 2]).unwrap().item().unwrap();
        let want = (loss_cross_entropy(&[0.2, 0.5, 0.3], 1).unwrap() + loss_cross_entropy(&[0.6, 0.1, 0.3], 2).unwrap()) / 2.0;
        assert!(close(ce, want));
        let p = Array::new([2], vec![0.9, 0.1]).unwrap();
        let y = Array::new([2], vec![1.0, 0.0]).unwrap();
        assert!(close(bce(&Tensor::constant(p), &y).unwrap().item().unwrap(), 0.105361));
    }

    #[test]
    fn total_is_exact_sum_and_rejects_bad_components() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total, 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0).unwrap().total, 6.0);
        let err = total_loss(1.0, f64::NAN, 0.0).unwrap_err();
        assert!(err.to_string().contains("l_l"));
        assert_eq!(err.exit_code(), 4);
        assert!(total_loss(-1.0, 0.0, 0.0).is_err());
    }

    fn zeroed(store: &ParamStore) {
        for p in store.params() {
            p.update(|a| a.data_mut().fill(0.0));
        }
    }

    #[test]
    fn detection_head_rows_sum_to_one_and_zero_weights_are_uniform() {
        let store = ParamStore::new();
        let head = DetectionHead::new(&Builder::new(&store, 1), 2 * 7 * 7, 16, 3).unwrap();
        let x = Tensor::constant(Array::from_fn([5, 2, 7, 7], |i| ((i * 37) % 11) as f64 - 5.0));
        let out = head.forward(&x, &Ctx::eval()).unwrap();
        assert_eq!(out.box_deltas.shape(), [5, 12]);
        for row in out.class_probs.to_vec().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        zeroed(&store);
        let out = head.forward(&x, &Ctx::eval()).unwrap();
        assert!(out.class_probs.to_vec().iter().all(|&p| close(p, 1.0 / 3.0)));
    }

    #[test]
    fn segmentation_head_shape_and_zero_weights() {
        let store = ParamStore::new();
        let head = SegmentationHead::new(&Builder::new(&store, 2), 4, 8, 2).unwrap();
        let x = Tensor::constant(Array::full([3, 4, 14, 14], 0.3));
        assert_eq!(head.forward(&x).unwrap().shape(), [3, 2, MASK_SIZE, MASK_SIZE]);
        zeroed(&store);
        let probs = head.forward(&x).unwrap().sigmoid().unwrap();
        assert!(probs.to_vec().iter().all(|&p| p == 0.5));
    }

    fn outputs(scores: &[f64]) -> RoiOutputs {
        let n = scores.len();
        let proposals = (0..n).map(|i| BBox::new(10.0 + 30.0 * i as f64, 10.0, 30.0 + 30.0 * i as f64, 30.0)).collect();
        let class_probs = Array::from_fn([n, 2], |i| if i % 2 == 1 { scores[i / 2] } else { 1.0 - scores[i / 2] });
        RoiOutputs {
            proposals,
            class_probs,
            box_deltas: Array::zeros([n, 8]),
            mask_logits: Some(Array::full([n, 2, MASK_SIZE, MASK_SIZE], 2.0)),
        }
    }

    #[test]
    fn postprocess_trivial_cases() {
        let cfg = PostprocessConfig::default();
        assert!(postprocess(&outputs(&[0.1, 0.4]), (256.0, 256.0), &cfg).is_empty());
        let dets = postprocess(&outputs(&[0.1, 0.95]), (256.0, 256.0), &cfg);
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!((d.label, d.score, d.bbox), (LYMPHOCYTE, 0.95, BBox::new(40.0, 10.0, 60.0, 30.0)));
        let mask = d.mask.as_ref().unwrap();
        assert_eq!((mask.width, mask.height, mask.area()), (20, 20, 400));
        assert!(mask.data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn detection_count_is_monotone_in_threshold() {
        let scores: Vec<f64> = (0..8).map(|i| 0.1 + 0.11 * i as f64).collect();
        let mut last = usize::MAX;
        for t in [0.05, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let cfg = PostprocessConfig {
                score_threshold: t,
                ..Default::default()
            };
            let n = postprocess(&outputs(&scores), (256.0, 256.0), &cfg).len();
            assert!(n <= last);
            last = n;
        }
    }
}
