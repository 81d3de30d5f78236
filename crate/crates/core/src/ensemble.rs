//! Weighted box fusion across models.
//!
//! Boxes of one class are visited in descending score (ties: model, then box
//! index) and joined to the best-overlapping cluster whose running fused box
//! reaches `iou_thresh` and which holds no box from the same model yet; a box
//! that finds none opens a cluster. A cluster's box is the weight·score mean
//! of its members; its score is the model-weighted mean score times the
//! fraction of models that contributed.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use crate::detections::{read_detections, write_detections, DetectionSet};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

struct Cluster {
    members: Vec<(usize, BoundingBox<f64>)>,
    fused: BoundingBox<f64>,
}

/// Mean of `xs` under weights `ws`, written as an offset from the first value
/// so identical inputs give back that value exactly.
fn weighted_mean(xs: &[f64], ws: &[f64]) -> f64 {
    let x0 = xs[0];
    let num: f64 = xs.iter().zip(ws).map(|(x, w)| w * (x - x0)).sum();
    x0 + num / ws.iter().sum::<f64>()
}

impl Cluster {
    fn refresh(&mut self, weights: &[f64], class_id: u32, total_models: usize) {
        let ws: Vec<f64> = self.members.iter().map(|(m, b)| weights[*m] * b.score.unwrap_or(0.0)).collect();
        let coord = |f: fn(&BoundingBox<f64>) -> f64| {
            let xs: Vec<f64> = self.members.iter().map(|(_, b)| f(b)).collect();
            // all-zero scores would make the weights vanish; fall back to model weights
            if ws.iter().all(|w| *w == 0.0) {
                weighted_mean(&xs, &self.members.iter().map(|(m, _)| weights[*m]).collect::<Vec<_>>())
            } else {
                weighted_mean(&xs, &ws)
            }
        };
        let mut b = BoundingBox::new(coord(|b| b.x_min), coord(|b| b.y_min), coord(|b| b.x_max), coord(|b| b.y_max), class_id);
        let scores: Vec<f64> = self.members.iter().map(|(_, b)| b.score.unwrap_or(0.0)).collect();
        let mw: Vec<f64> = self.members.iter().map(|(m, _)| weights[*m]).collect();
        let n = self.members.len();
        let mean = weighted_mean(&scores, &mw);
        b.score = Some(if n == total_models { mean } else { mean * n as f64 / total_models as f64 });
        self.fused = b;
    }
}

/// Fuses one image's detections from several models.
pub fn wbf(det_sets: &[Vec<BoundingBox<f64>>], weights: &[f64], iou_thresh: f64) -> Result<Vec<BoundingBox<f64>>> {
    if det_sets.len() != weights.len() {
        return Err(Error::InvalidArgument(format!("{} detection sets but {} weights", det_sets.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("ensemble weight {w} must be positive")));
    }
    let total = det_sets.len();
    let mut all: Vec<(usize, usize, BoundingBox<f64>)> =
        det_sets.iter().enumerate().flat_map(|(m, s)| s.iter().enumerate().map(move |(k, b)| (m, k, *b))).collect();
    all.sort_by(|a, b| {
        b.2.score.unwrap_or(0.0).partial_cmp(&a.2.score.unwrap_or(0.0)).unwrap_or(Ordering::Equal).then((a.0, a.1).cmp(&(b.0, b.1)))
    });
    let mut classes: Vec<u32> = all.iter().map(|a| a.2.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let mut clusters: Vec<Cluster> = Vec::new();
        for &(m, _, b) in all.iter().filter(|a| a.2.class_id == c) {
            let mut best: Option<(usize, f64)> = None;
            for (ci, cl) in clusters.iter().enumerate() {
                if cl.members.iter().any(|(mm, _)| *mm == m) {
                    continue;
                }
                let v = iou(&cl.fused, &b);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((ci, v));
                }
            }
            let ci = match best {
                Some((ci, _)) => ci,
                None => {
                    clusters.push(Cluster { members: Vec::new(), fused: b });
                    clusters.len() - 1
                }
            };
            clusters[ci].members.push((m, b));
            clusters[ci].refresh(weights, c, total);
        }
        out.extend(clusters.into_iter().map(|cl| cl.fused).filter(|b| b.score.unwrap_or(0.0) > 0.0));
    }
    out.sort_by(|a, b| {
        b.score.unwrap_or(0.0).partial_cmp(&a.score.unwrap_or(0.0)).unwrap_or(Ordering::Equal).then(a.class_id.cmp(&b.class_id)).then_with(|| {
            [a.x_min, a.y_min, a.x_max, a.y_max]
                .iter()
                .zip([b.x_min, b.y_min, b.x_max, b.y_max])
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleSummary {
    pub out: PathBuf,
    pub images: usize,
    /// Images missing from at least one input file.
    pub id_mismatches: usize,
}

/// Fuses detection files image by image. An image missing from a file counts
/// as that model seeing nothing there.
pub fn ensemble_run(det_files: &[PathBuf], weights: &[f64], iou_thresh: f64, out_path: &Path) -> Result<EnsembleSummary> {
    if det_files.len() != weights.len() {
        return Err(Error::InvalidArgument(format!("{} inputs but {} weights", det_files.len(), weights.len())));
    }
    let sets: Vec<DetectionSet> = det_files.iter().map(|p| read_detections(p)).collect::<Result<_>>()?;
    let mut ids: Vec<&String> = sets.iter().flat_map(|s| s.keys()).collect();
    ids.sort();
    ids.dedup();
    let mut fused = DetectionSet::new();
    let mut id_mismatches = 0;
    for id in &ids {
        let per_model: Vec<Vec<BoundingBox<f64>>> = sets.iter().map(|s| s.get(*id).cloned().unwrap_or_default()).collect();
        if sets.iter().any(|s| !s.contains_key(*id)) {
            id_mismatches += 1;
            log::warn!("image {id} missing from some ensemble inputs");
        }
        fused.insert((*id).clone(), wbf(&per_model, weights, iou_thresh)?);
    }
    write_detections(out_path, &fused)?;
    Ok(EnsembleSummary { out: out_path.to_path_buf(), images: ids.len(), id_mismatches })
}
