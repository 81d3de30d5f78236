//! Inference, dataset evaluation and throughput measurement.

use std::time::Instant;

use serde::Serialize;

use crate::backbone::image_batch;
use crate::detector::predict;
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, nms, EvalReport};
use crate::geometry::BoundingBox;
use crate::heads::decode;
use crate::model::ModelParams;
use crate::raster::{Image8, PairedSample};
use crate::scalar::Scalar;

/// Detections kept per image after suppression.
pub const MAX_DETECTIONS: usize = 100;

/// A model prepared for inference: auxiliary heads removed.
pub struct Detector<T> {
    params: ModelParams<T>,
    /// Square network resolution; `None` rounds each image to multiples of 32.
    pub input_size: Option<usize>,
}

fn round32(v: usize) -> usize {
    (((v + 16) / 32) * 32).max(32)
}

impl<T: Scalar> Detector<T> {
    pub fn new(params: &ModelParams<T>, input_size: Option<usize>) -> Result<Self> {
        if let Some(s) = input_size {
            if s == 0 || s % 32 != 0 {
                return Err(Error::InvalidArgument(format!("input size {s} is not a positive multiple of 32")));
            }
        }
        Ok(Detector { params: params.strip_aux(), input_size })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Network resolution `(width, height)` for an image of the given size.
    pub fn resolution(&self, width: usize, height: usize) -> (usize, usize) {
        match self.input_size {
            Some(s) => (s, s),
            None => (round32(width), round32(height)),
        }
    }

    /// Scored, suppressed boxes in the image's own pixel frame, best first.
    pub fn detect(&self, rgb: &Image8, tir: &Image8) -> Result<Vec<BoundingBox<f64>>> {
        if (rgb.width(), rgb.height()) != (tir.width(), tir.height()) {
            return Err(Error::Shape(format!(
                "rgb {}x{} vs tir {}x{}",
                rgb.width(),
                rgb.height(),
                tir.width(),
                tir.height()
            )));
        }
        let (w, h) = (rgb.width(), rgb.height());
        let (nw, nh) = self.resolution(w, h);
        let (r, t) = if (nw, nh) == (w, h) { (rgb.clone(), tir.clone()) } else { (rgb.resize(nw, nh), tir.resize(nw, nh)) };
        let raw = predict(&self.params, &image_batch::<T>(&[&r])?, &image_batch::<T>(&[&t])?)?;
        let cfg = self.params.config();
        let boxes = decode(&raw, 0, T::lit(cfg.conf_thresh));
        let mut kept = nms(&boxes, T::lit(cfg.nms_iou));
        kept.truncate(MAX_DETECTIONS);
        let (sx, sy) = (w as f64 / nw as f64, h as f64 / nh as f64);
        Ok(kept.iter().map(|b| b.cast::<f64>().scale(sx, sy)).collect())
    }

    pub fn detect_sample(&self, s: &PairedSample) -> Result<Vec<BoundingBox<f64>>> {
        self.detect(&s.rgb, &s.tir)
    }

    /// mAP of this model over `samples` against their own boxes.
    pub fn evaluate(&self, samples: &[PairedSample], iou_thresh: f64) -> Result<EvalReport> {
        let preds = samples.iter().map(|s| self.detect_sample(s)).collect::<Result<Vec<_>>>()?;
        let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
        evaluate_map(&preds, &gts, self.params.config().num_classes as usize, iou_thresh)
    }
}

/// One-shot inference: strip auxiliaries, forward, decode, suppress.
pub fn infer<T: Scalar>(params: &ModelParams<T>, sample: &PairedSample, input_size: Option<usize>) -> Result<Vec<BoundingBox<f64>>> {
    Detector::new(params, input_size)?.detect_sample(sample)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FpsReport {
    pub fps: f64,
    pub median_secs: f64,
    pub input_size: usize,
    pub iterations: usize,
    pub hardware: String,
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|v| v.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}, {cores} logical cores, {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Median single-image throughput at `input_size` after `warmup` discarded runs.
pub fn benchmark_fps<T: Scalar>(params: &ModelParams<T>, input_size: usize, n_iters: usize, warmup: usize) -> Result<FpsReport> {
    if n_iters < 3 {
        return Err(Error::InvalidArgument(format!("benchmark needs at least 3 iterations, got {n_iters}")));
    }
    let det = Detector::new(params, Some(input_size))?;
    let mut rgb = Image8::new(input_size, input_size, 3);
    for (i, v) in rgb.data_mut().iter_mut().enumerate() {
        *v = (i.wrapping_mul(2654435761) >> 7) as u8;
    }
    let tir = Image8::filled(input_size, input_size, 1, 96);
    for _ in 0..warmup {
        det.detect(&rgb, &tir)?;
    }
    let mut times: Vec<f64> = (0..n_iters)
        .map(|_| {
            let t = Instant::now();
            det.detect(&rgb, &tir).map(|_| t.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let median = if n_iters % 2 == 1 { times[n_iters / 2] } else { 0.5 * (times[n_iters / 2 - 1] + times[n_iters / 2]) };
    Ok(FpsReport { fps: 1.0 / median.max(1e-12), median_secs: median, input_size, iterations: n_iters, hardware: hardware_description() })
}
