mod common;

use cbhvt::generators::FeatureMap;
use cbhvt::region::{
    assign_targets, decode_box, decode_boxes, encode_box, generate_anchors, nms, roi_align, select_proposals, AnchorLabel,
    BBox, LevelShape,
};
use cbhvt_tensor::Tensor;
use common::*;
use rand::Rng;

#[test]
fn anchors_match_enumeration_oracle() {
    let mut r = rng(1);
    for _ in 0..20 {
        let shapes: Vec<LevelShape> = (0..r.random_range(1..4))
            .map(|_| LevelShape {
                h: r.random_range(1..6),
                w: r.random_range(1..6),
                stride: [4, 8, 16, 32][r.random_range(0..4)],
            })
            .collect();
        let scales: Vec<f64> = (0..r.random_range(1..4)).map(|_| r.random_range(2.0..40.0)).collect();
        let ratios: Vec<f64> = (0..r.random_range(1..3)).map(|_| r.random_range(0.5..2.0)).collect();
        let got = generate_anchors(&shapes, &scales, &ratios).unwrap();
        for (level, s) in got.levels.iter().zip(&shapes) {
            let mut want = Vec::new();
            for cell in 0..s.h * s.w {
                let (i, j) = (cell / s.w, cell % s.w);
                for &sc in &scales {
                    for &ra in &ratios {
                        let (w, h) = (sc * ra.sqrt(), sc / ra.sqrt());
                        let (cx, cy) = ((j as f64 + 0.5) * s.stride as f64, (i as f64 + 0.5) * s.stride as f64);
                        want.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                    }
                }
            }
            assert_eq!(level, &want);
        }
    }
}

#[test]
fn decode_matches_oracle() {
    let mut r = rng(2);
    let anchors: Vec<BBox> = (0..200).map(|_| random_box(&mut r, 256.0, 4.0, 40.0)).collect();
    let deltas: Vec<[f64; 4]> = (0..200).map(|_| [0; 4].map(|_: i32| r.random_range(-1.0..1.0))).collect();
    let got = decode_boxes(&anchors, &deltas, 1e6, 1e6);
    for ((a, d), g) in anchors.iter().zip(&deltas).zip(&got) {
        let want = decode(a, *d).to_array().map(|v| v.clamp(0.0, 1e6));
        assert!(max_diff(&g.to_array(), &want) < 1e-6);
    }
}

#[test]
fn encode_then_decode_round_trips() {
    let mut r = rng(3);
    for _ in 0..500 {
        let (gt, anchor) = (random_box(&mut r, 256.0, 2.0, 60.0), random_box(&mut r, 256.0, 2.0, 60.0));
        let back = decode_box(&anchor, &encode_box(&gt, &anchor));
        assert!(max_diff(&back.to_array(), &gt.to_array()) < 1e-5);
    }
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut r = rng(4);
    for _ in 0..100 {
        let n = r.random_range(1..60);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut r, 100.0, 5.0, 40.0)).collect();
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..20) as f64 / 20.0).collect();
        let thr = r.random_range(0.1..0.9);
        assert_eq!(nms(&boxes, &scores, thr), common::nms(&boxes, &scores, thr));
    }
}

#[test]
fn assignment_matches_iou_matrix_oracle() {
    let mut r = rng(5);
    for _ in 0..30 {
        let anchors: Vec<BBox> = (0..r.random_range(1..80)).map(|_| random_box(&mut r, 64.0, 4.0, 30.0)).collect();
        let gts: Vec<BBox> = (0..r.random_range(0..6)).map(|_| random_box(&mut r, 64.0, 4.0, 30.0)).collect();
        let got = assign_targets(&anchors, &gts, 0.7, 0.3).unwrap();
        let m: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
        for (i, row) in m.iter().enumerate() {
            let best = row.iter().copied().fold(0.0, f64::max);
            let argmax_for_some_gt = (0..gts.len()).any(|g| {
                let col_best = m.iter().map(|rw| rw[g]).fold(0.0, f64::max);
                col_best > 0.0 && row[g] == col_best
            });
            let want = if !gts.is_empty() && (best >= 0.7 || argmax_for_some_gt) {
                AnchorLabel::Positive
            } else if best < 0.3 {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            assert_eq!(got.labels[i], want, "anchor {i}");
        }
    }
}

#[test]
fn roi_align_matches_sample_point_oracle() {
    let mut r = rng(6);
    let map = random_array(&mut r, &[4, 16, 16], 1.0);
    let level = FeatureMap {
        tensor: Tensor::constant(map.clone()),
        stride: 4,
    };
    let boxes: Vec<BBox> = (0..50).map(|_| random_box(&mut r, 64.0, 1.0, 40.0)).collect();
    let got = roi_align(&level, &boxes, (7, 7), 2).unwrap();
    assert_eq!(got.shape(), [50, 4, 7, 7]);
    let data = got.to_vec();
    for (k, b) in boxes.iter().enumerate() {
        let want = common::roi_align(&map, b, 0.25, 7, 2);
        assert!(max_diff(&data[k * 4 * 49..(k + 1) * 4 * 49], &want) < 1e-6, "box {k}");
    }
}

#[test]
fn proposal_selection_matches_composed_oracle() {
    let mut r = rng(7);
    for _ in 0..30 {
        let n = r.random_range(1..120);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut r, 128.0, 3.0, 40.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let (pre, post) = (r.random_range(1..80), r.random_range(1..40));
        let got = select_proposals(&boxes, &scores, pre, post, 0.7);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        order.truncate(pre);
        let cand: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
        let cs: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let mut want: Vec<(BBox, f64)> = common::nms(&cand, &cs, 0.7).into_iter().map(|k| (cand[k], cs[k])).collect();
        want.truncate(post);
        assert_eq!(got.len(), want.len());
        assert!(got.len() <= post);
        for (p, (b, s)) in got.iter().zip(&want) {
            assert_eq!((p.bbox, p.objectness), (*b, *s));
        }
    }
}
