//! The three loss terms on hand-sized inputs, then the detection and
//! segmentation heads feeding post-processing.

use cbhvt::heads::{loss_bce, loss_cross_entropy, loss_l1, postprocess, total_loss, DetectionHead, PostprocessConfig, RoiOutputs, SegmentationHead};
use cbhvt::{BBox, Ctx};
use cbhvt_tensor::{Array, Builder, ParamStore, Tensor};

fn main() -> cbhvt::Result<()> {
    let l_c = loss_cross_entropy(&[0.2, 0.8], 1)?;
    let l_l = loss_l1(&[[0.1, -0.2, 0.0, 0.3]], &[[0.0, 0.0, 0.0, 0.0]])?;
    let l_b = loss_bce(&[0.9, 0.2, 0.6], &[1.0, 0.0, 1.0])?;
    let total = total_loss(l_c, l_l, l_b)?;
    println!("l_c {:.4}  l_l {:.4}  l_b {:.4}  total {:.4}", total.l_c, total.l_l, total.l_b, total.total);

    let store = ParamStore::new();
    let b = Builder::new(&store, 5);
    let (c, pool) = (8, 7);
    let det = DetectionHead::new(&b.sub("det"), c * pool * pool, 32, 2)?;
    let seg = SegmentationHead::new(&b.sub("seg"), c, 8, 2)?;
    let proposals = vec![BBox::new(10.0, 10.0, 30.0, 28.0), BBox::new(12.0, 11.0, 31.0, 30.0), BBox::new(60.0, 40.0, 75.0, 58.0)];
    let n = proposals.len();
    let roi = Tensor::constant(Array::from_fn([n, c, pool, pool], |i| ((i * 17) % 23) as f64 / 23.0 - 0.5));
    let mask_roi = Tensor::constant(Array::from_fn([n, c, 14, 14], |i| ((i * 5) % 19) as f64 / 19.0 - 0.5));
    let out = det.forward(&roi, &Ctx::eval())?;
    let outputs = RoiOutputs {
        proposals,
        class_probs: out.class_probs.value().clone(),
        box_deltas: out.box_deltas.value().clone(),
        mask_logits: Some(seg.forward(&mask_roi)?.value().clone()),
    };
    println!("class probabilities {:.3?}", outputs.class_probs.data());
    let cfg = PostprocessConfig {
        score_threshold: 0.3,
        ..PostprocessConfig::default()
    };
    for d in postprocess(&outputs, (96.0, 96.0), &cfg) {
        let area = d.mask.as_ref().map_or(0, |m| m.area());
        println!("label {} score {:.3} box {:.1?} mask pixels {area}", d.label, d.score, d.bbox.to_array());
    }
    Ok(())
}
