//! AP at IoU 0.5 with greedy matching, plus multi-run aggregation.
//!
//! AP is the all-points area under the interpolated (monotone envelope)
//! precision-recall curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datapipe::AnnotatedImage;
use crate::detector::{predict, Detector, DetectorParams};
use crate::error::{Error, Result};
use crate::geometry::{iou, rank_descending, BBox, Klass, ScoredBox};

pub const MATCH_IOU: f64 = 0.5;
/// Score floor for detections entering AP.
pub const EVAL_CONF: f64 = 0.01;
pub const EVAL_NMS: f64 = 0.5;

/// Greedy matching in descending score order (stable by index). Each
/// prediction takes the unmatched ground truth with the highest IoU (lowest
/// index on ties) when that IoU is at least `iou_thresh`. Returns
/// `(pred_index, is_true_positive)` in the visiting order.
pub fn match_detections(preds: &[ScoredBox], gts: &[BBox], iou_thresh: f64) -> Vec<(usize, bool)> {
    let mut taken = vec![false; gts.len()];
    rank_descending(preds.iter().map(|p| p.score))
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&preds[i].bbox, gt);
                if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (i, best.is_some())
        })
        .collect()
}

/// Predictions and ground truth of one class on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub id: String,
    pub preds: Vec<ScoredBox>,
    pub gts: Vec<BBox>,
}

/// Pooled AP over images. Global score ties are broken by image id, then by
/// prediction index.
pub fn average_precision(images: &[EvalImage], iou_thresh: f64) -> Result<f64> {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    if n_gt == 0 {
        return Err(Error::Metric("average precision is undefined without ground truth".into()));
    }
    let mut pool: Vec<(f64, &str, usize, bool)> = Vec::new();
    for im in images {
        for (i, tp) in match_detections(&im.preds, &im.gts, iou_thresh) {
            pool.push((im.preds[i].score, &im.id, i, tp));
        }
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let mut recall = Vec::with_capacity(pool.len());
    let mut precision = Vec::with_capacity(pool.len());
    let mut tp = 0usize;
    for (k, &(_, _, _, hit)) in pool.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub per_class_ap: BTreeMap<Klass, f64>,
    pub mean_ap: f64,
    pub n_images: usize,
    pub run_seed: u64,
}

impl APReport {
    pub fn from_per_class(per_class_ap: BTreeMap<Klass, f64>, n_images: usize, run_seed: u64) -> Result<Self> {
        if per_class_ap.is_empty() {
            return Err(Error::Metric("report needs at least one class".into()));
        }
        if per_class_ap.values().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Metric(format!("AP outside [0, 1]: {per_class_ap:?}")));
        }
        let mean_ap = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
        Ok(APReport { per_class_ap, mean_ap, n_images, run_seed })
    }
}

/// Runs the detector over `dataset` and reports per-class AP at IoU 0.5.
/// Classes without any ground truth in the dataset are rejected.
pub fn evaluate(
    detector: &Detector,
    params: &DetectorParams,
    dataset: &[AnnotatedImage],
    run_seed: u64,
) -> Result<APReport> {
    let mut per_class: [Vec<EvalImage>; 2] = [Vec::new(), Vec::new()];
    for img in dataset {
        let dets = predict(detector, params, &img.image, EVAL_CONF, EVAL_NMS)?;
        for klass in Klass::ALL {
            per_class[klass.index()].push(EvalImage {
                id: img.id.clone(),
                preds: dets.get(klass).to_vec(),
                gts: img.labels.get(klass).to_vec(),
            });
        }
    }
    let mut aps = BTreeMap::new();
    for klass in Klass::ALL {
        let ap = average_precision(&per_class[klass.index()], MATCH_IOU)
            .map_err(|e| Error::Metric(format!("{klass}: {e}")))?;
        aps.insert(klass, ap);
    }
    APReport::from_per_class(aps, dataset.len(), run_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub n_runs: usize,
    pub ap_diff: Option<f64>,
}

/// Mean and spread of `mean_ap` over runs; `ap_diff` is the best known
/// score for the dataset minus this mean.
pub fn aggregate_runs(reports: &[APReport], best_for_dataset: Option<f64>) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Metric("cannot aggregate zero runs".into()));
    }
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.mean_ap).sum::<f64>() / n;
    let var = reports.iter().map(|r| (r.mean_ap - mean).powi(2)).sum::<f64>() / n;
    Ok(AggregateReport { mean, stddev: var.sqrt(), n_runs: reports.len(), ap_diff: best_for_dataset.map(|b| b - mean) })
}

/// Average over datasets of (best score - score).
pub fn ap_diff(best: &[f64], scores: &[f64]) -> Result<f64> {
    if best.is_empty() || best.len() != scores.len() {
        return Err(Error::Metric(format!("ap_diff needs matching non-empty lists, got {} and {}", best.len(), scores.len())));
    }
    Ok(best.iter().zip(scores).map(|(b, s)| b - s).sum::<f64>() / best.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ScoredBox {
        ScoredBox::new(BBox::from_corner(x1, y1, x2, y2).unwrap(), score, Klass::Face).unwrap()
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corner(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn single_match_rule() {
        let g = [gt(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_detections(&[sb(0.0, 0.0, 10.0, 10.0, 0.9)], &g, 0.5), vec![(0, true)]);
        let m = match_detections(&[sb(0.0, 0.0, 10.0, 10.0, 0.4), sb(0.0, 0.0, 10.0, 9.0, 0.8)], &g, 0.5);
        assert_eq!(m, vec![(1, true), (0, false)]);
    }

    #[test]
    fn ap_trivial_cases() {
        let g = vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)];
        let perfect = EvalImage { id: "a".into(), preds: vec![sb(0.0, 0.0, 10.0, 10.0, 0.9), sb(20.0, 20.0, 30.0, 30.0, 0.3)], gts: g.clone() };
        assert_eq!(average_precision(&[perfect], 0.5).unwrap(), 1.0);
        let none = EvalImage { id: "a".into(), preds: vec![], gts: g };
        assert_eq!(average_precision(&[none], 0.5).unwrap(), 0.0);
        let empty = EvalImage { id: "a".into(), preds: vec![sb(0.0, 0.0, 1.0, 1.0, 0.5)], gts: vec![] };
        assert!(matches!(average_precision(&[empty], 0.5), Err(Error::Metric(_))));
    }

    #[test]
    fn ap_hand_enumerated() {
        // ranking: TP, FP, TP, FP with 2 gts
        // precision 1, 1/2, 2/3, 2/4; envelope 1, 2/3, 2/3, 1/2; recall 1/2, 1/2, 1, 1
        let im = EvalImage {
            id: "a".into(),
            preds: vec![
                sb(0.0, 0.0, 10.0, 10.0, 0.9),
                sb(40.0, 40.0, 50.0, 50.0, 0.8),
                sb(20.0, 20.0, 30.0, 30.0, 0.7),
                sb(60.0, 60.0, 70.0, 70.0, 0.6),
            ],
            gts: vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)],
        };
        let ap = average_precision(&[im], 0.5).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let rep = |v: f64| APReport::from_per_class(BTreeMap::from([(Klass::Face, v)]), 1, 0).unwrap();
        let same = aggregate_runs(&[rep(0.3), rep(0.3), rep(0.3)], None).unwrap();
        assert_eq!(same.stddev, 0.0);
        let a = aggregate_runs(&[rep(0.01), rep(0.02), rep(0.03), rep(0.04), rep(0.05)], Some(0.04)).unwrap();
        assert!((a.mean - 0.03).abs() < 1e-15);
        assert!((a.stddev - 0.02f64.sqrt() / 10.0).abs() < 1e-15);
        assert!((a.ap_diff.unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(a.n_runs, 5);
        assert!(aggregate_runs(&[], None).is_err());
        assert!((ap_diff(&[49.81], &[49.05]).unwrap() - 0.76).abs() < 1e-9);
    }

    #[test]
    fn report_rejects_out_of_range() {
        assert!(APReport::from_per_class(BTreeMap::from([(Klass::Face, 1.5)]), 1, 0).is_err());
        let r = APReport::from_per_class(BTreeMap::from([(Klass::Face, 0.2), (Klass::Body, 0.6)]), 3, 9).unwrap();
        assert!((r.mean_ap - 0.4).abs() < 1e-15);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"face\":0.2"), "{json}");
    }
}
