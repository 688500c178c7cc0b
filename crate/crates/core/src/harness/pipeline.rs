//! The assembled detector: generators, exploitation, merging, region
//! proposals and the two heads, plus its training loss and inference.

use std::path::{Path, PathBuf};

use cbhvt_tensor::checkpoint::Checkpoint;
use cbhvt_tensor::ops::Stencil;
use cbhvt_tensor::{Array, Builder, Param, ParamStore, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ctx::Ctx;
use crate::data::{ImageSample, Mask};
use crate::error::{config_err, Error, Result};
use crate::exploitation::{align_and_concat, Exploiter};
use crate::generators::{build_combo, generator_combo, run_combo, FeatureMap, Generator, Profile, CHECKPOINT_FORMAT_VERSION};
use crate::heads::{
    bce, cross_entropy, l1, paste_mask, select_detections, total_loss, Detection, DetectionHead, LossBreakdown,
    PostprocessConfig, SegmentationHead, MASK_SIZE,
};
use crate::merging::{merger_preset, FusionBlock, Fpn};
use crate::region::{
    assign_targets, decode_boxes, encode_box, generate_anchors, roi_align_pyramid, select_proposals, AnchorLabel,
    AnchorSet, BBox, LevelShape, RpnHead,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnSettings {
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Anchors sampled per image for the objectness loss.
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub pre_nms_train: usize,
    pub post_nms_train: usize,
    pub pre_nms_test: usize,
    pub post_nms_test: usize,
    pub nms_threshold: f64,
}

impl Default for RpnSettings {
    fn default() -> Self {
        Self {
            anchor_scales: vec![8.0, 16.0, 32.0],
            anchor_ratios: vec![1.0],
            positive_iou: 0.7,
            negative_iou: 0.3,
            batch_size: 32,
            positive_fraction: 0.5,
            pre_nms_train: 1000,
            post_nms_train: 128,
            pre_nms_test: 500,
            post_nms_test: 100,
            nms_threshold: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiSettings {
    /// Proposals sampled per image for the second stage.
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub foreground_iou: f64,
    pub pool_size: usize,
    pub mask_pool_size: usize,
    pub sampling_ratio: usize,
    pub head_width: usize,
    pub mask_head_width: usize,
}

impl Default for RoiSettings {
    fn default() -> Self {
        Self {
            batch_size: 64,
            positive_fraction: 0.25,
            foreground_iou: 0.5,
            pool_size: 7,
            mask_pool_size: 14,
            sampling_ratio: 2,
            head_width: 128,
            mask_head_width: 16,
        }
    }
}

/// Pretrained weights or freezing for one named generator member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOverride {
    pub name: String,
    #[serde(default)]
    pub pretrained_weights_path: Option<PathBuf>,
    #[serde(default)]
    pub freeze: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator_combo: String,
    pub merger_preset: String,
    pub c_fpn: usize,
    pub profile: Profile,
    pub exploit_reduction: usize,
    /// Including background.
    pub num_classes: usize,
    pub rpn: RpnSettings,
    pub roi: RoiSettings,
    pub postprocess: PostprocessConfig,
    /// Scales the proposal-stage terms inside `l_c` and `l_l`.
    pub rpn_loss_weight: f64,
    pub generator_overrides: Vec<GeneratorOverride>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator_combo: "Channel Generator-1".into(),
            merger_preset: "Channel Merger-1".into(),
            c_fpn: 16,
            profile: Profile::Desk,
            exploit_reduction: 4,
            num_classes: 2,
            rpn: RpnSettings::default(),
            roi: RoiSettings::default(),
            postprocess: PostprocessConfig::default(),
            rpn_loss_weight: 1.0,
            generator_overrides: vec![],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.postprocess;
        for (name, v) in [("score_threshold", p.score_threshold), ("mask_threshold", p.mask_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return config_err(format!("{name} {v} must lie in (0, 1)"));
            }
        }
        if self.c_fpn == 0 || self.num_classes < 2 {
            return config_err("c_fpn must be positive and num_classes at least 2");
        }
        if self.roi.batch_size == 0 || self.rpn.batch_size == 0 {
            return config_err("sample batch sizes must be positive");
        }
        for f in [self.rpn.positive_fraction, self.roi.positive_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return config_err(format!("positive fraction {f} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// The assembled detector. Parameter names are dotted paths under
/// `generators`, `exploit`, `fusion`, `fpn`, `rpn`, `det_head` and
/// `mask_head`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    store: ParamStore,
    pub generators: Vec<Generator>,
    pub exploiter: Exploiter,
    pub fusion: Vec<FusionBlock>,
    pub fpn: Fpn,
    pub rpn: RpnHead,
    pub det_head: DetectionHead,
    pub mask_head: SegmentationHead,
}

/// Builds the default-configured pipeline for a named combination.
pub fn build_pipeline(combo_name: &str, merger_name: &str, c_fpn: usize) -> Result<Model> {
    build_model(
        &ModelConfig {
            generator_combo: combo_name.into(),
            merger_preset: merger_name.into(),
            c_fpn,
            ..ModelConfig::default()
        },
        0,
    )
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut combo = generator_combo(&config.generator_combo, config.profile)?;
    let preset = merger_preset(&config.merger_preset)?;
    for o in &config.generator_overrides {
        let Some(m) = combo.members.iter_mut().find(|m| m.name == o.name) else {
            let names: Vec<&str> = combo.members.iter().map(|m| m.name.as_str()).collect();
            return config_err(format!("override for unknown member {:?}; members: {}", o.name, names.join(", ")));
        };
        m.pretrained_weights_path = o.pretrained_weights_path.clone();
        m.freeze = o.freeze;
    }
    let store = ParamStore::new();
    let root = Builder::new(&store, seed);
    let generators = build_combo(&combo, &root.sub("generators"))?;
    let level_channels: Vec<usize> = (0..4)
        .map(|s| combo.members.iter().map(|m| m.channels_per_stage[s]).sum())
        .collect();
    let exploiter = Exploiter::new(&root.sub("exploit"), &level_channels, config.exploit_reduction)?;
    let fusion = level_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| FusionBlock::new(&root.sub("fusion").sub(format!("level{i}")), c, &preset.spec(c, config.c_fpn)))
        .collect::<Result<Vec<_>>>()?;
    let fused: Vec<usize> = vec![config.c_fpn; level_channels.len()];
    let fpn = Fpn::new(&root.sub("fpn"), &fused, config.c_fpn)?;
    let per_cell = config.rpn.anchor_scales.len() * config.rpn.anchor_ratios.len();
    let rpn = RpnHead::new(&root.sub("rpn"), config.c_fpn, per_cell)?;
    let pool = config.roi.pool_size;
    let det_head = DetectionHead::new(
        &root.sub("det_head"),
        config.c_fpn * pool * pool,
        config.roi.head_width,
        config.num_classes,
    )?;
    let mask_head = SegmentationHead::new(&root.sub("mask_head"), config.c_fpn, config.roi.mask_head_width, config.num_classes)?;
    Ok(Model {
        config: config.clone(),
        seed,
        store,
        generators,
        exploiter,
        fusion,
        fpn,
        rpn,
        det_head,
        mask_head,
    })
}

/// Per-image training signals.
struct Sampled {
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn sample_labels<R: Rng>(labels: &[AnchorLabel], batch: usize, positive_fraction: f64, rng: &mut R) -> Sampled {
    sample_stratified(labels, &[labels.len()], batch, positive_fraction, rng)
}

/// `strata` gives consecutive group lengths. Each group holding negatives
/// contributes one before the rest are drawn uniformly, so every pyramid
/// level sees some loss on every step.
fn sample_stratified<R: Rng>(labels: &[AnchorLabel], strata: &[usize], batch: usize, positive_fraction: f64, rng: &mut R) -> Sampled {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let n_pos = pos.len().min((batch as f64 * positive_fraction).floor() as usize);
    let n_neg = neg.len().min(batch - n_pos);
    let pick = |v: &[usize], k: usize, rng: &mut R| -> Vec<usize> { sample_indices(rng, v.len(), k).into_iter().map(|i| v[i]).collect() };
    let mut positives = pick(&pos, n_pos, rng);
    positives.sort_unstable();

    let mut negatives = Vec::with_capacity(n_neg);
    let mut start = 0;
    for &len in strata {
        let group: Vec<usize> = neg.iter().copied().filter(|&i| i >= start && i < start + len).collect();
        start += len;
        if negatives.len() < n_neg && !group.is_empty() {
            negatives.push(group[rng.random_range(0..group.len())]);
        }
    }
    let rest: Vec<usize> = neg.iter().copied().filter(|i| !negatives.contains(i)).collect();
    let k = n_neg - negatives.len();
    negatives.extend(pick(&rest, k, rng));
    negatives.sort_unstable();
    Sampled { positives, negatives }
}

/// Ground-truth mask resampled onto an `m x m` grid over `bbox` and
/// thresholded at one half.
pub fn mask_target(mask: &Mask, bbox: &BBox, m: usize) -> Vec<f64> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let at = |y: usize, x: usize| mask.data[y * w + x] as f64;
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        let y = bbox.y1 + (i as f64 + 0.5) * bbox.height() / m as f64 - 0.5;
        let sy = Stencil::new(y, h);
        for j in 0..m {
            let x = bbox.x1 + (j as f64 + 0.5) * bbox.width() / m as f64 - 0.5;
            let sx = Stencil::new(x, w);
            let v = (1.0 - sy.w) * ((1.0 - sx.w) * at(sy.i0, sx.i0) + sx.w * at(sy.i0, sx.i1))
                + sy.w * ((1.0 - sx.w) * at(sy.i1, sx.i0) + sx.w * at(sy.i1, sx.i1));
            out.push(if v >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

fn rows(t: &Tensor) -> Vec<[f64; 4]> {
    t.value().data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

impl Model {
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Scalar weights, buffers excluded.
    pub fn parameter_count(&self) -> usize {
        self.store.weight_count()
    }

    pub fn trainable_params(&self) -> Vec<Param> {
        self.store.trainable()
    }

    /// Trainable parameters grouped by owning layer (name minus its last
    /// segment).
    pub fn param_groups(&self) -> Vec<(String, Vec<Param>)> {
        let mut groups: Vec<(String, Vec<Param>)> = Vec::new();
        for p in self.trainable_params() {
            let owner = p.name().rsplit_once('.').map_or(p.name(), |(o, _)| o).to_string();
            match groups.iter_mut().find(|(g, _)| *g == owner) {
                Some((_, v)) => v.push(p),
                None => groups.push((owner, vec![p])),
            }
        }
        groups
    }

    /// Boosted, exploited, fused and pyramid-merged features.
    pub fn features(&self, image: &Tensor, ctx: &Ctx) -> Result<Vec<FeatureMap>> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let pyramids = run_combo(&self.generators, image, ctx)?;
        for (p, g) in pyramids.iter().zip(&self.generators) {
            p.validate(h, w).map_err(|e| e.context(format!("generator {}", g.name())))?;
        }
        let names: Vec<String> = self.generators.iter().map(|g| g.name().to_string()).collect();
        let boosted = self.exploiter.exploit(&align_and_concat(&pyramids, &names)?, ctx)?;
        let fused = boosted
            .levels
            .iter()
            .zip(&self.fusion)
            .map(|(l, f)| f.forward(l, ctx))
            .collect::<Result<Vec<_>>>()?;
        self.fpn.forward(&fused)
    }

    pub fn anchors(&self, levels: &[FeatureMap]) -> Result<AnchorSet> {
        let shapes: Vec<LevelShape> = levels.iter().map(LevelShape::from).collect();
        generate_anchors(&shapes, &self.config.rpn.anchor_scales, &self.config.rpn.anchor_ratios)
    }

    fn proposals(&self, levels: &[FeatureMap], anchors: &AnchorSet, size: (f64, f64), train: bool) -> Result<(Tensor, Tensor, Vec<BBox>)> {
        let out = self.rpn.forward(levels, anchors)?;
        let boxes = decode_boxes(&anchors.all(), &rows(&out.deltas), size.0, size.1);
        let objectness: Vec<f64> = out.logits.value().data().iter().map(|&z| cbhvt_tensor::ops::sigmoid(z)).collect();
        let r = &self.config.rpn;
        let (pre, post) = if train { (r.pre_nms_train, r.post_nms_train) } else { (r.pre_nms_test, r.post_nms_test) };
        let props = select_proposals(&boxes, &objectness, pre, post, r.nms_threshold)
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        Ok((out.logits, out.deltas, props))
    }

    /// Training loss on one labelled image. Proposal-stage terms are folded
    /// into `l_c` and `l_l`.
    pub fn loss<R: Rng>(&self, sample: &ImageSample, ctx: &Ctx, rng: &mut R) -> Result<(Tensor, LossBreakdown)> {
        if !sample.labeled {
            return Err(Error::Data(format!("{} has no annotations to train on", sample.id)));
        }
        let image = Tensor::constant(sample.to_array());
        let size = (sample.width() as f64, sample.height() as f64);
        let levels = self.features(&image, ctx)?;
        let anchors = self.anchors(&levels)?;
        let all_anchors = anchors.all();
        let (logits, deltas, mut props) = self.proposals(&levels, &anchors, size, true)?;
        let gts = &sample.boxes;
        let rs = &self.config.rpn;
        let w = self.config.rpn_loss_weight;

        // Proposal stage.
        let a = assign_targets(&all_anchors, gts, rs.positive_iou, rs.negative_iou)?;
        let strata: Vec<usize> = anchors.levels.iter().map(Vec::len).collect();
        let s = sample_stratified(&a.labels, &strata, rs.batch_size, rs.positive_fraction, rng);
        let mut picked = s.positives.clone();
        picked.extend(&s.negatives);
        let target = Array::from_fn([picked.len(), 1], |i| if i < s.positives.len() { 1.0 } else { 0.0 });
        let rpn_cls = bce(&logits.reshape(&[logits.len(), 1])?.index_select(&picked)?.sigmoid()?, &target)
            .map_err(|e| e.context("l_c (proposal objectness)"))?;
        let rpn_targets = Array::from_fn([s.positives.len(), 4], |i| a.targets[s.positives[i / 4]][i % 4]);
        let rpn_reg = if s.positives.is_empty() {
            Tensor::constant(Array::scalar(0.0))
        } else {
            l1(&deltas.index_select(&s.positives)?, &rpn_targets).map_err(|e| e.context("l_l (proposal boxes)"))?
        };

        // Second stage.
        props.extend(gts.iter().copied());
        let ra = &self.config.roi;
        let pa = assign_targets(&props, gts, ra.foreground_iou, ra.foreground_iou)?;
        let s2 = sample_labels(&pa.labels, ra.batch_size, ra.positive_fraction, rng);
        let mut rois: Vec<usize> = s2.positives.clone();
        rois.extend(&s2.negatives);
        let roi_boxes: Vec<BBox> = rois.iter().map(|&i| props[i]).collect();
        let labels: Vec<usize> = (0..rois.len()).map(|i| usize::from(i < s2.positives.len())).collect();
        let feats = roi_align_pyramid(&levels, &roi_boxes, (ra.pool_size, ra.pool_size), ra.sampling_ratio)?;
        let det = self.det_head.forward(&feats, ctx)?;
        let det_cls = cross_entropy(&det.class_probs, &labels).map_err(|e| e.context("l_c (classification)"))?;
        let n_pos = s2.positives.len();
        let (det_reg, mask_loss) = if n_pos == 0 {
            (Tensor::constant(Array::scalar(0.0)), Tensor::constant(Array::scalar(0.0)))
        } else {
            let pos_rows: Vec<usize> = (0..n_pos).collect();
            let matched: Vec<usize> = s2.positives.iter().map(|&i| pa.matched[i].expect("positive has a match")).collect();
            let box_targets = Array::from_fn([n_pos, 4], |i| {
                encode_box(&gts[matched[i / 4]], &roi_boxes[i / 4])[i % 4]
            });
            let fg = crate::heads::LYMPHOCYTE;
            let pred = det.box_deltas.index_select(&pos_rows)?.narrow(1, 4 * fg, 4)?;
            let det_reg = l1(&pred, &box_targets).map_err(|e| e.context("l_l (box regression)"))?;
            let pos_boxes = &roi_boxes[..n_pos];
            let mfeats = roi_align_pyramid(&levels, pos_boxes, (ra.mask_pool_size, ra.mask_pool_size), ra.sampling_ratio)?;
            let mlog = self.mask_head.forward(&mfeats)?;
            let m = mlog.shape()[2];
            let mut tgt = Vec::with_capacity(n_pos * m * m);
            for (k, b) in pos_boxes.iter().enumerate() {
                tgt.extend(mask_target(&sample.masks[matched[k]], b, m));
            }
            let tgt = Array::new([n_pos, 1, m, m], tgt)?;
            let mask_loss = bce(&mlog.narrow(1, fg, 1)?.sigmoid()?, &tgt).map_err(|e| e.context("l_b (mask)"))?;
            (det_reg, mask_loss)
        };

        let l_c = det_cls.add(&rpn_cls.mul_scalar(w)?)?;
        let l_l = det_reg.add(&rpn_reg.mul_scalar(w)?)?;
        let breakdown = total_loss(l_c.item()?, l_l.item()?, mask_loss.item()?)?;
        let total = l_c.add(&l_l)?.add(&mask_loss)?;
        Ok((total, breakdown))
    }

    /// Detections with box-local masks for one image.
    pub fn predict(&self, sample: &ImageSample) -> Result<Vec<Detection>> {
        self.predict_with(sample, &Ctx::eval())
    }

    pub fn predict_with(&self, sample: &ImageSample, ctx: &Ctx) -> Result<Vec<Detection>> {
        let image = Tensor::constant(sample.to_array());
        let size = (sample.width() as f64, sample.height() as f64);
        let levels = self.features(&image, ctx)?;
        let anchors = self.anchors(&levels)?;
        let (_, _, props) = self.proposals(&levels, &anchors, size, false)?;
        if props.is_empty() {
            return Ok(vec![]);
        }
        let ra = &self.config.roi;
        let feats = roi_align_pyramid(&levels, &props, (ra.pool_size, ra.pool_size), ra.sampling_ratio)?;
        let det = self.det_head.forward(&feats, ctx)?;
        let pp = &self.config.postprocess;
        let selected = select_detections(&props, det.class_probs.value(), det.box_deltas.value(), size, pp);
        if selected.is_empty() {
            return Ok(vec![]);
        }
        let boxes: Vec<BBox> = selected.iter().map(|s| s.bbox).collect();
        let mfeats = roi_align_pyramid(&levels, &boxes, (ra.mask_pool_size, ra.mask_pool_size), ra.sampling_ratio)?;
        let logits = self.mask_head.forward(&mfeats)?;
        let (k, m) = (logits.shape()[1], logits.shape()[2]);
        debug_assert_eq!(m, MASK_SIZE);
        let data = logits.value().data();
        Ok(selected
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let base = (r * k + s.label) * m * m;
                let probs: Vec<f64> = data[base..base + m * m].iter().map(|&z| cbhvt_tensor::ops::sigmoid(z)).collect();
                Detection {
                    bbox: s.bbox,
                    label: s.label,
                    score: s.score,
                    mask: Some(paste_mask(&probs, m, &s.bbox, pp.mask_threshold)),
                }
            })
            .collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            json!({
                "type": "model",
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "seed": self.seed,
                "config": self.config,
            }),
            self.store.snapshot(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }

    /// Rebuilds the model recorded in a checkpoint and restores every value.
    pub fn load(path: &Path) -> Result<Model> {
        let ck = Checkpoint::load(path)?;
        let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
        if ck.manifest.get("type") != Some(&json!("model")) {
            return Err(bad("not a model checkpoint"));
        }
        let config: ModelConfig = serde_json::from_value(ck.manifest.get("config").cloned().unwrap_or_default())
            .map_err(|e| Error::json(path, e))?;
        let seed = ck.manifest.get("seed").and_then(|v| v.as_u64()).ok_or_else(|| bad("manifest lacks a seed"))?;
        let mut plain = config.clone();
        for o in &mut plain.generator_overrides {
            o.pretrained_weights_path = None;
        }
        let model = build_model(&plain, seed)?;
        model
            .store
            .load_named(&ck.tensors, "")
            .map_err(|e| Error::from(e).context(format!("loading {}", path.display())))?;
        Ok(Model { config, ..model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn samples(n: usize) -> Vec<ImageSample> {
        synth_generate(&SynthConfig {
            n_images: n,
            image_size: 64,
            blobs_per_image: (1, 3),
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn stratified_sampling_touches_every_group() {
        use AnchorLabel::*;
        let mut labels = vec![Negative; 1000];
        labels.extend([Negative, Ignore, Positive, Negative]);
        labels[3] = Positive;
        for seed in 0..50 {
            let s = sample_stratified(&labels, &[1000, 4], 8, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(s.positives, [3, 1002]);
            assert_eq!(s.negatives.len(), 6);
            assert!(s.negatives.iter().any(|&i| i >= 1000));
            assert!(s.negatives.iter().all(|&i| labels[i] == Negative));
            assert!(s.negatives.windows(2).all(|w| w[0] < w[1]));
        }
        let flat = sample_labels(&labels, 4, 0.25, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((flat.positives.len(), flat.negatives.len()), (1, 3));
    }

    #[test]
    fn build_reports_unknown_names() {
        assert!(build_pipeline("Channel Generator-1", "Channel Merger-2", 8).is_ok());
        assert_eq!(build_pipeline("Channel Generator-9", "Channel Merger-1", 8).unwrap_err().exit_code(), 2);
        assert_eq!(build_pipeline("Channel Generator-1", "nope", 8).unwrap_err().exit_code(), 2);
        let cfg = ModelConfig {
            generator_overrides: vec![GeneratorOverride {
                name: "missing".into(),
                pretrained_weights_path: None,
                freeze: Some(true),
            }],
            ..ModelConfig::default()
        };
        assert!(build_model(&cfg, 0).unwrap_err().to_string().contains("resnet50, pvt"));
    }

    #[test]
    fn features_share_the_pyramid_width() {
        let model = build_pipeline("Channel Generator-1", "Channel Merger-1", 8).unwrap();
        let image = Tensor::constant(samples(1)[0].to_array());
        let levels = model.features(&image, &Ctx::eval()).unwrap();
        assert_eq!(levels.iter().map(|l| (l.channels(), l.stride)).collect::<Vec<_>>(), [(8, 4), (8, 8), (8, 16), (8, 32)]);
        assert_eq!(levels[0].size(), (16, 16));
    }

    #[test]
    fn loss_is_the_sum_of_its_parts() {
        let model = build_pipeline("Channel Generator-1", "Channel Merger-1", 8).unwrap();
        let s = &samples(1)[0];
        let (t, br) = model.loss(s, &Ctx::train(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((t.item().unwrap() - (br.l_c + br.l_l + br.l_b)).abs() < 1e-12);
        assert!(br.l_c > 0.0 && br.l_b > 0.0);
        let mut unlabeled = s.clone();
        unlabeled.labeled = false;
        assert_eq!(model.loss(&unlabeled, &Ctx::train(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model(&ModelConfig::default(), 5).unwrap();
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in model.store().params().iter().zip(back.store().params()) {
            assert_eq!((a.name(), a.value().data()), (b.name(), b.value().data()));
        }
        let s = &samples(1)[0];
        assert_eq!(model.predict(s).unwrap(), back.predict(s).unwrap());
    }

    #[test]
    fn frozen_member_is_untouched_by_training() {
        let dir = tempfile::tempdir().unwrap();
        let weights = dir.path().join("pvt.ckpt");
        let model = build_model(&ModelConfig::default(), 1).unwrap();
        model.generators[1].save_weights(&weights).unwrap();
        let config = crate::harness::TrainConfig {
            max_iterations: Some(2),
            batch_size: 1,
            learning_rate: 0.01,
            seed: 2,
            model: ModelConfig {
                generator_overrides: vec![GeneratorOverride {
                    name: "pvt".into(),
                    pretrained_weights_path: Some(weights),
                    freeze: None,
                }],
                ..ModelConfig::default()
            },
            ..Default::default()
        };
        let (trained, _) = crate::harness::train(&config, &samples(2), None).unwrap();
        let before = model.store().with_prefix("generators.pvt.");
        let after = trained.store().with_prefix("generators.pvt.");
        assert!(!after.is_empty());
        for (a, b) in before.iter().zip(&after) {
            assert!(!b.is_trainable());
            assert_eq!(a.value().data(), b.value().data(), "{}", a.name());
        }
        let moved = model
            .store()
            .with_prefix("generators.resnet50.")
            .iter()
            .zip(trained.store().with_prefix("generators.resnet50."))
            .any(|(a, b)| a.value().data() != b.value().data());
        assert!(moved);
    }
}
