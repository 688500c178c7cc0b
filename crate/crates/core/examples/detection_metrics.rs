//! Greedy matching and pooled precision, recall and F-score.

use std::collections::BTreeMap;

use cbhvt::heads::Detection;
use cbhvt::metrics::{evaluate_dataset, f_score, match_detections, precision, recall, Criterion};
use cbhvt::BBox;

fn det(b: BBox, score: f64) -> Detection {
    Detection {
        bbox: b,
        label: 1,
        score,
        mask: None,
    }
}

fn main() -> cbhvt::Result<()> {
    let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0), BBox::new(50.0, 0.0, 60.0, 12.0)];
    let preds = vec![BBox::new(1.0, 0.0, 11.0, 10.0), BBox::new(22.0, 21.0, 33.0, 30.0), BBox::new(80.0, 80.0, 90.0, 90.0)];
    let scores = [0.9, 0.8, 0.7];
    for criterion in [Criterion::Iou { threshold: 0.5 }, Criterion::CenterDistance { pixels: 2.0 }] {
        let m = match_detections(&preds, &scores, &gts, &criterion)?;
        println!("{}: tp {} fp {} fn {} pairs {:?}", criterion.describe(), m.tp, m.fp, m.fn_, m.pairs);
    }

    let dets: BTreeMap<String, Vec<Detection>> = [
        ("a".to_string(), preds.iter().zip(scores).map(|(b, s)| det(*b, s)).collect()),
        ("b".to_string(), vec![]),
    ]
    .into();
    let anns: BTreeMap<String, Vec<BBox>> = [("a".to_string(), gts), ("b".to_string(), vec![BBox::new(5.0, 5.0, 9.0, 9.0)])].into();
    let report = evaluate_dataset(&dets, &anns, &Criterion::default())?;
    println!("pooled: P {:.3} R {:.3} F {:.3}", report.precision, report.recall, report.f_score);

    let (p, r) = (precision(93, 18), recall(93, 7));
    println!("93 hits, 18 false alarms, 7 misses: P {p:.4} R {r:.2} F {:.3}", f_score(p, r));
    Ok(())
}
