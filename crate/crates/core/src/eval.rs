//! Non-maximum suppression and mAP evaluation.
//!
//! AP follows the 101-point interpolation: the mean over recall levels
//! `r = 0, 0.01, …, 1` of the highest precision reached at any recall ≥ r.
//! Precision/recall points are taken at every distinct score threshold, so the
//! result does not depend on the order of equally scored detections. Within an
//! image, detections are matched in descending score with coordinates as the
//! tie-break, each to the unmatched ground truth of highest IoU.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::scalar::Scalar;

/// Greedy per-class suppression. Higher scores first, ties to the lower index;
/// output follows that order.
pub fn nms<T: Scalar>(dets: &[BoundingBox<T>], iou_thresh: T) -> Vec<BoundingBox<T>> {
    let score = |b: &BoundingBox<T>| b.score.unwrap_or(T::zero());
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| score(&dets[b]).partial_cmp(&score(&dets[a])).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|&k| dets[k].class_id != d.class_id || iou(&dets[k], d) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// AP per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean AP over classes that have ground truth.
    pub map: f64,
    pub counts: Vec<ClassCounts>,
    pub iou_thresh: f64,
    #[serde(serialize_with = "secs")]
    pub wall_clock: Duration,
}

fn secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

fn coord_key(b: &BoundingBox<f64>) -> [f64; 4] {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

fn by_score_then_coords(a: &BoundingBox<f64>, b: &BoundingBox<f64>) -> Ordering {
    let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
    sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| {
        coord_key(a).iter().zip(coord_key(b)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

/// 101-point interpolated AP of `(precision, recall)` points.
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    // max precision to the right, over points sorted by recall
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut envelope = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for k in (0..pts.len()).rev() {
        best = best.max(pts[k].0);
        envelope[k] = best;
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < pts.len() && pts[k].1 < r {
            k += 1;
        }
        if k < pts.len() {
            sum += envelope[k];
        }
    }
    sum / 101.0
}

/// Per-class AP at `iou_thresh` over images `preds[i]` / `gts[i]`.
pub fn evaluate_map(
    preds: &[Vec<BoundingBox<f64>>],
    gts: &[Vec<BoundingBox<f64>>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<EvalReport> {
    let start = Instant::now();
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} prediction lists for {} images", preds.len(), gts.len())));
    }
    for (kind, set) in [("prediction", preds), ("ground truth", gts)] {
        for b in set.iter().flatten() {
            if b.class_id as usize >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "{kind} class_id {} outside [0, {num_classes})",
                    b.class_id
                )));
            }
        }
    }
    let mut per_class_ap = vec![None; num_classes];
    let mut counts = vec![ClassCounts::default(); num_classes];
    for c in 0..num_classes as u32 {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == c).count()).sum();
        // (score, is_tp) of every detection of class c
        let mut scored: Vec<(f64, bool)> = Vec::new();
        for (p, g) in preds.iter().zip(gts) {
            let mut dets: Vec<&BoundingBox<f64>> = p.iter().filter(|b| b.class_id == c).collect();
            dets.sort_by(|a, b| by_score_then_coords(a, b));
            let gt: Vec<&BoundingBox<f64>> = g.iter().filter(|b| b.class_id == c).collect();
            let mut used = vec![false; gt.len()];
            for d in dets {
                let mut best: Option<(usize, f64)> = None;
                for (k, t) in gt.iter().enumerate() {
                    if used[k] {
                        continue;
                    }
                    let v = iou(d, t);
                    if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((k, v));
                    }
                }
                if let Some((k, _)) = best {
                    used[k] = true;
                }
                scored.push((d.score.unwrap_or(0.0), best.is_some()));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let tp_total = scored.iter().filter(|s| s.1).count();
        counts[c as usize] = ClassCounts { tp: tp_total, fp: scored.len() - tp_total, fn_: n_gt - tp_total };
        if n_gt == 0 {
            continue;
        }
        let mut points = Vec::new();
        let (mut tp, mut seen) = (0usize, 0usize);
        for (k, &(score, hit)) in scored.iter().enumerate() {
            tp += hit as usize;
            seen += 1;
            // close a point only at the end of a group of equal scores
            if scored.get(k + 1).is_none_or(|n| n.0 != score) {
                points.push((tp as f64 / seen as f64, tp as f64 / n_gt as f64));
            }
        }
        per_class_ap[c as usize] = Some(interpolated_ap(&points));
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(EvalReport { per_class_ap, map, counts, iou_thresh, wall_clock: start.elapsed() })
}
