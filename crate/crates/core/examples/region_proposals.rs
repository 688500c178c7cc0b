//! Anchors, target assignment, box coding, NMS and ROI align on a
//! synthetic image.

use cbhvt::data::{synth_generate, SynthConfig};
use cbhvt::harness::{build_model, ModelConfig};
use cbhvt::region::{assign_targets, decode_box, encode_box, nms, roi_align_pyramid, select_proposals};
use cbhvt::Ctx;
use cbhvt_tensor::Tensor;

fn main() -> cbhvt::Result<()> {
    let sample = synth_generate(&SynthConfig {
        n_images: 1,
        seed: 2,
        ..SynthConfig::default()
    })?
    .remove(0);
    let model = build_model(&ModelConfig::default(), 0)?;
    let levels = model.features(&Tensor::constant(sample.to_array()), &Ctx::eval())?;
    let anchors = model.anchors(&levels)?;
    let per_level: Vec<usize> = anchors.levels.iter().map(Vec::len).collect();
    println!("{} anchors per level {per_level:?}", anchors.len());

    let rpn = &model.config.rpn;
    let all = anchors.all();
    let assignment = assign_targets(&all, &sample.boxes, rpn.positive_iou, rpn.negative_iou)?;
    println!(
        "{} cells: {} positive anchors, {} negative",
        sample.len(),
        assignment.positives().len(),
        assignment.negatives().len()
    );
    if let Some(&i) = assignment.positives().first() {
        let gt = sample.boxes[assignment.matched[i].expect("positive anchors have a match")];
        let d = encode_box(&gt, &all[i]);
        println!("anchor {:?} -> deltas {d:.3?} -> {:?}", all[i].to_array(), decode_box(&all[i], &d).to_array());
    }

    // Untrained objectness: a deterministic ramp stands in for scores.
    let scores: Vec<f64> = (0..all.len()).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let kept = nms(&all, &scores, 0.7);
    let props = select_proposals(&all, &scores, 500, 50, 0.7);
    println!("nms keeps {} of {}; {} proposals after top-k", kept.len(), all.len(), props.len());
    let boxes: Vec<_> = props.iter().map(|p| p.bbox).collect();
    let feats = roi_align_pyramid(&levels, &boxes, (7, 7), 2)?;
    println!("pooled features {:?}", feats.shape());
    Ok(())
}
