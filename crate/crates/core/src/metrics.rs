//! Detection matching and precision / recall / F-score.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::heads::Detection;
use crate::region::BBox;

/// When a prediction counts as hitting a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Criterion {
    Iou { threshold: f64 },
    CenterDistance { pixels: f64 },
}

impl Default for Criterion {
    fn default() -> Self {
        Criterion::Iou { threshold: 0.5 }
    }
}

impl Criterion {
    pub const DEFAULT_CENTER_PIXELS: f64 = 12.0;

    pub fn validate(&self) -> Result<()> {
        match *self {
            Criterion::Iou { threshold } if !(threshold > 0.0 && threshold <= 1.0) => {
                config_err(format!("IoU threshold {threshold} must lie in (0, 1]"))
            }
            Criterion::CenterDistance { pixels } if !(pixels >= 0.0 && pixels.is_finite()) => {
                config_err(format!("center distance {pixels} must be finite and non-negative"))
            }
            _ => Ok(()),
        }
    }

    /// Higher is better; `None` when the pair does not qualify.
    fn affinity(&self, pred: &BBox, gt: &BBox) -> Option<f64> {
        match *self {
            Criterion::Iou { threshold } => {
                let iou = pred.iou(gt);
                (iou >= threshold).then_some(iou)
            }
            Criterion::CenterDistance { pixels } => {
                let (a, b) = (pred.center(), gt.center());
                let d = (a.0 - b.0).hypot(a.1 - b.1);
                (d <= pixels).then_some(-d)
            }
        }
    }

    pub fn matches(&self, pred: &BBox, gt: &BBox) -> bool {
        self.affinity(pred, gt).is_some()
    }

    pub fn describe(&self) -> String {
        match self {
            Criterion::Iou { threshold } => format!("IoU >= {threshold}"),
            Criterion::CenterDistance { pixels } => format!("center distance <= {pixels} px"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(prediction index, gt index)`.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching, predictions taken by descending score. Each
/// prediction takes the best-qualifying unmatched gt (lowest index on ties).
pub fn match_detections(preds: &[BBox], scores: &[f64], gts: &[BBox], criterion: &Criterion) -> Result<MatchResult> {
    criterion.validate()?;
    if preds.len() != scores.len() {
        return Err(Error::InvalidInput(format!("{} boxes vs {} scores", preds.len(), scores.len())));
    }
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for p in crate::region::rank_by_score(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            if let Some(a) = criterion.affinity(&preds[p], gt) {
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((g, a));
                }
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            pairs.push((p, g));
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    })
}

pub fn recall(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub criterion: Criterion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageCounts>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, criterion: Criterion) -> Self {
        let (p, r) = (precision(tp, fp), recall(tp, fn_));
        Self {
            tp,
            fp,
            fn_,
            precision: p,
            recall: r,
            f_score: f_score(p, r),
            criterion,
            per_image: None,
            config_hash: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Matches every image independently and pools the counts.
pub fn evaluate_dataset(
    detections: &BTreeMap<String, Vec<Detection>>,
    annotations: &BTreeMap<String, Vec<BBox>>,
    criterion: &Criterion,
) -> Result<MetricsReport> {
    criterion.validate()?;
    let missing_dets: Vec<&str> = annotations.keys().filter(|k| !detections.contains_key(*k)).map(String::as_str).collect();
    let missing_gts: Vec<&str> = detections.keys().filter(|k| !annotations.contains_key(*k)).map(String::as_str).collect();
    if !missing_dets.is_empty() || !missing_gts.is_empty() {
        return Err(Error::Data(format!(
            "image ids do not align; without detections: [{}]; without annotations: [{}]",
            missing_dets.join(", "),
            missing_gts.join(", ")
        )));
    }
    let mut per_image = Vec::with_capacity(annotations.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (id, gts) in annotations {
        let dets = &detections[id];
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let m = match_detections(&boxes, &scores, gts, criterion)?;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        per_image.push(ImageCounts {
            id: id.clone(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
    }
    let mut report = MetricsReport::from_counts(tp, fp, fn_, *criterion);
    report.per_image = Some(per_image);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection {
            bbox,
            label: 1,
            score,
            mask: None,
        }
    }

    #[test]
    fn exact_prediction_is_one_true_positive() {
        let g = b(10.0, 10.0, 20.0, 20.0);
        let m = match_detections(&[g], &[0.9], &[g], &Criterion::default()).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
    }

    #[test]
    fn no_predictions_all_false_negatives() {
        let gts = vec![b(0.0, 0.0, 5.0, 5.0); 5];
        let m = match_detections(&[], &[], &gts, &Criterion::default()).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 5));
    }

    #[test]
    fn recall_and_f_score_arithmetic() {
        assert_eq!(recall(93, 7), 0.93);
        assert_eq!(recall(0, 5), 0.0);
        assert_eq!(recall(99, 1), 0.99);
        assert!((f_score(0.8, 0.8) - 0.8).abs() < 1e-15);
        assert_eq!(f_score(1.0, 0.0), 0.0);
        assert!((f_score(0.8353, 0.93) - 0.880).abs() <= 1e-3);
        // Precision recovered from an (F, R) pair.
        let (f, r) = (0.88, 0.93);
        let p = f * r / (2.0 * r - f);
        assert!((f_score(p, r) - f).abs() < 1e-12);
    }

    #[test]
    fn bad_criterion_is_config_error() {
        let e = match_detections(&[], &[], &[], &Criterion::Iou { threshold: 0.0 }).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(Criterion::CenterDistance { pixels: -1.0 }.validate().is_err());
    }

    #[test]
    fn center_distance_mode() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let shifted = b(10.0, 0.0, 20.0, 10.0);
        let c = Criterion::CenterDistance { pixels: 12.0 };
        assert!(c.matches(&shifted, &gt));
        assert!(!Criterion::default().matches(&shifted, &gt));
    }

    #[test]
    fn two_image_pooling_by_hand() {
        let mut dets = BTreeMap::new();
        let mut gts = BTreeMap::new();
        // Image a: one hit, one miss-fire, one missed gt.
        dets.insert("a".into(), vec![det(b(0.0, 0.0, 10.0, 10.0), 0.9), det(b(50.0, 50.0, 60.0, 60.0), 0.8)]);
        gts.insert("a".into(), vec![b(0.0, 0.0, 10.0, 10.0), b(30.0, 30.0, 40.0, 40.0)]);
        // Image b: two hits.
        dets.insert("b".into(), vec![det(b(0.0, 0.0, 8.0, 8.0), 0.7), det(b(20.0, 20.0, 30.0, 30.0), 0.6)]);
        gts.insert("b".into(), vec![b(0.0, 0.0, 8.0, 9.0), b(20.0, 21.0, 30.0, 30.0)]);
        let r = evaluate_dataset(&dets, &gts, &Criterion::default()).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (3, 1, 1));
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.75);
        assert_eq!(r.per_image.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn perfect_and_empty_predictors() {
        let mut gts = BTreeMap::new();
        gts.insert("x".to_string(), vec![b(0.0, 0.0, 4.0, 4.0), b(10.0, 10.0, 14.0, 14.0)]);
        let perfect: BTreeMap<_, _> = gts
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|&g| det(g, 1.0)).collect::<Vec<_>>()))
            .collect();
        let r = evaluate_dataset(&perfect, &gts, &Criterion::default()).unwrap();
        assert_eq!((r.precision, r.recall, r.f_score), (1.0, 1.0, 1.0));
        let empty: BTreeMap<_, _> = gts.keys().map(|k| (k.clone(), Vec::new())).collect();
        assert_eq!(evaluate_dataset(&empty, &gts, &Criterion::default()).unwrap().recall, 0.0);
    }

    #[test]
    fn missing_ids_are_listed() {
        let mut gts = BTreeMap::new();
        gts.insert("img7".to_string(), vec![]);
        let e = evaluate_dataset(&BTreeMap::new(), &gts, &Criterion::default()).unwrap_err();
        assert!(e.to_string().contains("img7"));
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn report_json_round_trip() {
        let mut r = MetricsReport::from_counts(3, 1, 2, Criterion::CenterDistance { pixels: 12.0 });
        r.config_hash = Some("abc".into());
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"fn\":2"));
        assert_eq!(serde_json::from_str::<MetricsReport>(&text).unwrap(), r);
    }
}
