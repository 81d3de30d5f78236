//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary (`harness = false`).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use duodet::augment::{rotate_box_hull, rotate_sample, shift_sample, AugmentConfig, AugmentPlan, GeoTarget, RngStream, apply_pipeline};
use duodet::config::parse_config;
use duodet::detector::{loss_and_grads, predict};
use duodet::ensemble::wbf;
use duodet::eval::evaluate_map;
use duodet::fusion::{fuse_scale, fuse_scale_tensors};
use duodet::geometry::clip_box;
use duodet::heads::assign_targets;
use duodet::infer::Detector;
use duodet::ingest::{compute_crop_grid, crop_sample, import_paired, synthesize_tir, CropRect};
use duodet::model::{record_size, write_checkpoint, AuxWeights, Forward, HeadKind, Mode, ModelConfig, STRIDES};
use duodet::raster::{Image8, PairedSample};
use duodet::tensor::Tensor;
use duodet::train::Trainer;
use duodet::{iou, BoundingBox, BranchTag, ModelParams};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn core_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core")
}

fn fixture_samples() -> Vec<PairedSample> {
    let dir = core_dir().join("fixtures/toy");
    let m = import_paired(&dir).expect("bundled fixture");
    (0..m.records.len()).map(|i| m.load_sample(i, &dir).unwrap()).collect()
}

// ---------------------------------------------------------------- overfit

fn overfit() -> Outcome {
    let start = Instant::now();
    let cfg = parse_config(&core_dir().join("fixtures/toy_train.toml")).map_err(|e| e.to_string())?;
    let samples = fixture_samples();
    let budget = cfg.max_steps.unwrap_or(1000).min(1000);
    let mut t = Trainer::new(cfg, samples.clone()).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    let mut best = (0.0, 0);
    'outer: for epoch in 0.. {
        for batch in t.epoch_batches(epoch) {
            let prepared: Vec<_> = batch.iter().map(|&i| t.prepared_sample(epoch, i).unwrap()).collect();
            let log = t.train_step(&prepared).map_err(|e| e.to_string())?;
            losses.push(log.total);
            let step = log.step + 1;
            if step % 50 == 0 {
                let det = Detector::new(t.params(), Some(128)).map_err(|e| e.to_string())?;
                let map = det.evaluate(&samples, 0.5).map_err(|e| e.to_string())?.map;
                if map > best.0 {
                    best = (map, step);
                }
                if map >= 0.90 {
                    break 'outer;
                }
            }
            if step >= budget {
                break 'outer;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let drop = losses.get(199).map(|l200| 1.0 - l200 / losses[0]);
    let detail = format!(
        "best mAP@0.5 {:.4} at step {} of {budget}, {secs:.0} s; loss {:.3} -> {:.3} by step 200 ({:.0}% drop)",
        best.0,
        best.1,
        losses[0],
        losses.get(199).copied().unwrap_or(f64::NAN),
        100.0 * drop.unwrap_or(0.0)
    );
    check(best.0 >= 0.90, format!("mAP below 0.90: {detail}"))?;
    check(secs < 15.0 * 60.0, format!("over 15 minutes: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- gradients

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        stem_channels: 4,
        channels: [6, 8, 8],
        blocks_per_stage: 1,
        fusion_heads: 2,
        aux_weights: AuxWeights { pre: 0.25, post: 0.5 },
        ..Default::default()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = ModelParams::<f64>::init(&tiny_config(), 9).unwrap();
    let (n, s) = (2, 64);
    let rgb = rand_tensor(&mut rng, &[n, 3, s, s], 0.0, 1.0);
    let tir = rand_tensor(&mut rng, &[n, 3, s, s], 0.0, 1.0);
    let gt = [
        vec![BoundingBox::new(4.0, 6.0, 30.0, 22.0, 0), BoundingBox::new(30.0, 30.0, 60.0, 58.0, 1)],
        vec![BoundingBox::new(10.0, 12.0, 20.0, 40.0, 1)],
    ];
    let grids = STRIDES.map(|st| (s / st, s / st));
    let targets: Vec<_> = gt.iter().map(|g| assign_targets(g, grids, STRIDES)).collect();
    let out = loss_and_grads(&p, &rgb, &tir, &targets, Mode::Train, true, true).map_err(|e| e.to_string())?;
    let loss_at = |q: &ModelParams<f64>, r: &Tensor<f64>, t: &Tensor<f64>| {
        loss_and_grads(q, r, t, &targets, Mode::Train, false, false).unwrap().losses.total
    };
    let mut worst: Vec<(String, f64, usize)> = Vec::new();

    // parameter groups, 10 coordinates each, of the assembled total loss
    let groups: Vec<(String, Box<dyn Fn(&str, BranchTag) -> bool>)> = vec![
        ("backbone_rgb".into(), Box::new(|_, t| t == BranchTag::BackboneRgb)),
        ("backbone_tir".into(), Box::new(|_, t| t == BranchTag::BackboneTir)),
        ("fusion params".into(), Box::new(|_, t| t == BranchTag::Fusion)),
        ("head main".into(), Box::new(|n, _| n.starts_with(&format!("{}.", HeadKind::Main.prefix())))),
        ("head aux_pre_rgb".into(), Box::new(|n, _| n.starts_with(&format!("{}.", HeadKind::AuxPreRgb.prefix())))),
        ("head aux_pre_tir".into(), Box::new(|n, _| n.starts_with(&format!("{}.", HeadKind::AuxPreTir.prefix())))),
        ("head aux_post".into(), Box::new(|n, _| n.starts_with(&format!("{}.", HeadKind::AuxPost.prefix())))),
        ("total (all params)".into(), Box::new(|_, _| true)),
    ];
    for (label, select) in &groups {
        let idxs: Vec<usize> =
            (0..p.entries().len()).filter(|&i| p.entries()[i].trainable() && select(&p.entries()[i].name, p.entries()[i].tag)).collect();
        check(!idxs.is_empty(), format!("{label}: no parameters"))?;
        let mut w = 0.0f64;
        for _ in 0..10 {
            let idx = idxs[rng.random_range(0..idxs.len())];
            let k = rng.random_range(0..p.entries()[idx].value.numel());
            let shifted = |d: f64| {
                let mut q = p.clone();
                q.entries_mut()[idx].value.data_mut()[k] += d;
                loss_at(&q, &rgb, &tir)
            };
            let fd = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
            let an = out.grads.iter().find(|(i, _)| *i == idx).map(|(_, g)| g.data()[k]).unwrap_or(0.0);
            w = w.max(rel_err(fd, an));
        }
        worst.push((label.clone(), w, 10));
    }

    // total loss w.r.t. input pixels of both modalities
    let (gr, gt_) = out.input_grads.as_ref().ok_or("no input gradients")?;
    for (label, which) in [("total (rgb pixels)", 0), ("total (tir pixels)", 1)] {
        let mut w = 0.0f64;
        for _ in 0..10 {
            let k = rng.random_range(0..rgb.numel());
            let shifted = |d: f64| {
                let (mut r, mut t) = (rgb.clone(), tir.clone());
                if which == 0 { r.data_mut()[k] += d } else { t.data_mut()[k] += d }
                loss_at(&p, &r, &t)
            };
            let fd = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
            let an = if which == 0 { gr.data()[k] } else { gt_.data()[k] };
            w = w.max(rel_err(fd, an));
        }
        worst.push((label.into(), w, 10));
    }

    // fusion block w.r.t. both modality inputs, every level
    let cfg = tiny_config();
    for (label, which) in [("fusion (f_rgb)", 0), ("fusion (f_tir)", 1)] {
        let mut w = 0.0f64;
        let mut count = 0;
        for level in 0..3 {
            let side = [8, 4, 2][level];
            let shape = [2, cfg.channels[level], side, side];
            let (a, b) = (rand_tensor(&mut rng, &shape, -1.0, 1.0), rand_tensor(&mut rng, &shape, -1.0, 1.0));
            let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let mut fwd = Forward::new(&p, Mode::Eval, false);
            let (va, vb) = (fwd.input(a.clone(), true), fwd.input(b.clone(), true));
            let fused = fuse_scale(&mut fwd, level, va, vb).map_err(|e| e.to_string())?.fused;
            let grads = fwd.tape.backward(vec![(fused, r.clone())]).map_err(|e| e.to_string())?;
            let g = grads.get(if which == 0 { va } else { vb }).ok_or("missing fusion input grad")?.clone();
            let obj = |x: &Tensor<f64>, y: &Tensor<f64>| -> f64 {
                let f = fuse_scale_tensors(&p, level, x, y).unwrap();
                f.data().iter().zip(r.data()).map(|(u, v)| u * v).sum()
            };
            for _ in 0..4 {
                let k = rng.random_range(0..a.numel());
                let shifted = |d: f64| {
                    let (mut x, mut y) = (a.clone(), b.clone());
                    if which == 0 { x.data_mut()[k] += d } else { y.data_mut()[k] += d }
                    obj(&x, &y)
                };
                let fd = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
                w = w.max(rel_err(fd, g.data()[k]));
                count += 1;
            }
        }
        worst.push((label.into(), w, count));
    }

    let summary = worst.iter().map(|(l, w, c)| format!("{l} {w:.1e}/{c}")).collect::<Vec<_>>().join(", ");
    for (l, w, _) in &worst {
        check(*w <= TOL, format!("{l}: relative error {w:.2e} > {TOL:e}; {summary}"))?;
    }
    Ok(format!("max relative error per group: {summary}"))
}

// ---------------------------------------------------------------- aux equivalence

fn aux_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let full = ModelParams::<f32>::init(&ModelConfig::default(), 4).unwrap();
    let stripped = full.strip_aux();
    check(!stripped.has_aux() && full.has_aux(), "strip_aux left auxiliary parameters")?;
    for case in 0..20 {
        let side = [32, 64, 96][case % 3];
        let shape = [1, 3, side, side];
        let n = 3 * side * side;
        let r = Tensor::<f32>::from_vec(&shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let t = Tensor::<f32>::from_vec(&shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let a = predict(&full, &r, &t).map_err(|e| e.to_string())?;
        let b = predict(&stripped, &r, &t).map_err(|e| e.to_string())?;
        for (x, y) in a.levels.levels.iter().zip(&b.levels.levels) {
            let same = x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            check(same && x.shape() == y.shape(), format!("case {case}: outputs differ"))?;
        }
    }
    let aux_bytes: usize = full.entries().iter().filter(|e| e.tag.is_aux()).map(record_size).sum();
    let (fb, sb) = (write_checkpoint(&full).len(), write_checkpoint(&stripped).len());
    check(fb - sb == aux_bytes, format!("checkpoint shrank by {} bytes, aux records are {aux_bytes}", fb - sb))?;
    Ok(format!("20 inputs bit-identical; checkpoint {fb} -> {sb} bytes (aux {aux_bytes})"))
}

// ---------------------------------------------------------------- fusion

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = ModelConfig::default();
    let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let mut zeroed = p.clone();
    zeroed.zero_tag(BranchTag::Fusion);
    let mut worst_row = 0.0f64;
    for level in 0..3 {
        let side = [16, 8, 4][level];
        let shape = [2, cfg.channels[level], side, side];
        let a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let f = fuse_scale_tensors(&zeroed, level, &a, &b).map_err(|e| e.to_string())?;
        let exact = f.data().iter().zip(a.data().iter().zip(b.data())).all(|(v, (x, y))| *v == (x + y) / 2.0);
        check(exact, format!("level {level}: zeroed fusion is not the exact mean"))?;

        let mut fwd = Forward::new(&p, Mode::Eval, false);
        let (va, vb) = (fwd.input(a, false), fwd.input(b, false));
        let sf = fuse_scale(&mut fwd, level, va, vb).map_err(|e| e.to_string())?;
        for node in sf.attention {
            let probs = fwd.tape.attention_probs(node).ok_or("no attention probabilities")?;
            for row in probs.chunks(side * side) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check(worst_row <= 1e-6, format!("attention row sum off by {worst_row:e}"))?;
    Ok(format!("zero-collapse exact at 3 scales; max |row sum - 1| = {worst_row:.1e}"))
}

// ---------------------------------------------------------------- augmentation

/// Hull of the rotated box's mask, rasterized at `SUB`× sub-pixel resolution.
fn mask_hull(b: &BoundingBox<f64>, angle: f64, w: usize, h: usize) -> Option<BoundingBox<f64>> {
    const SUB: usize = 4;
    let cell = 1.0 / SUB as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = angle.to_radians().sin_cos();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for j in 0..h * SUB {
        let y = (j as f64 + 0.5) * cell;
        for i in 0..w * SUB {
            let x = (i as f64 + 0.5) * cell;
            let (dx, dy) = (x - cx, y - cy);
            let (u, v) = (cx + c * dx + s * dy, cy - s * dx + c * dy);
            if u >= b.x_min && u < b.x_max && v >= b.y_min && v < b.y_max {
                x0 = x0.min(x - cell / 2.0);
                y0 = y0.min(y - cell / 2.0);
                x1 = x1.max(x + cell / 2.0);
                y1 = y1.max(y + cell / 2.0);
            }
        }
    }
    x0.is_finite().then(|| BoundingBox::new(x0, y0, x1, y1, b.class_id))
}

fn random_sample(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PairedSample {
    let mut rgb = Image8::new(w, h, 3);
    rng.fill(rgb.data_mut());
    let mut tir = Image8::new(w, h, 1);
    rng.fill(tir.data_mut());
    let boxes = (0..3)
        .map(|k| {
            let (x, y) = (rng.random_range(0.0..w as f64 - 20.0), rng.random_range(0.0..h as f64 - 20.0));
            BoundingBox::new(x, y, x + rng.random_range(8.0..20.0), y + rng.random_range(8.0..20.0), k)
        })
        .collect();
    PairedSample { rgb, tir, boxes, meta: Default::default() }
}

fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // rotated + clipped hulls against a rasterized mask
    let (w, h) = (160, 120);
    let mut worst = 1.0f64;
    let mut cases = 0;
    while cases < 500 {
        let bw = rng.random_range(10.0..80.0);
        let bh = rng.random_range(10.0..80.0);
        let x = rng.random_range(-20.0..w as f64 - 10.0);
        let y = rng.random_range(-20.0..h as f64 - 10.0);
        let b = BoundingBox::new(x, y, x + bw, y + bh, 0);
        let Some(b) = clip_box(&b, w as f64, h as f64, 0.0) else { continue };
        // sub-pixel slivers left by clipping are below what a mask can resolve
        if b.x_max - b.x_min < 4.0 || b.y_max - b.y_min < 4.0 {
            continue;
        }
        let angle = rng.random_range(-5.0..5.0);
        let (Some(ours), Some(oracle)) =
            (clip_box(&rotate_box_hull(&b, angle, w, h), w as f64, h as f64, 0.0), mask_hull(&b, angle, w, h))
        else {
            continue;
        };
        worst = worst.min(iou(&ours, &oracle));
        cases += 1;
    }
    check(worst >= 0.95, format!("hull/mask IoU down to {worst:.4}"))?;

    // one-sided geometric ops leave the other modality and the boxes untouched
    for _ in 0..50 {
        let s = random_sample(&mut rng, 64, 48);
        let angle = rng.random_range(-5.0..5.0);
        let (dx, dy) = (rng.random_range(-10..=10), rng.random_range(-10..=10));
        for out in [rotate_sample(&s, angle, GeoTarget::RgbOnly, 0.25), shift_sample(&s, dx, dy, GeoTarget::RgbOnly, 0.25)] {
            check(out.tir == s.tir && out.boxes == s.boxes, "rgb-only op touched tir or boxes")?;
        }
        for out in [rotate_sample(&s, angle, GeoTarget::TirOnly, 0.25), shift_sample(&s, dx, dy, GeoTarget::TirOnly, 0.25)] {
            check(out.rgb == s.rgb && out.boxes == s.boxes, "tir-only op touched rgb or boxes")?;
        }
    }

    // bit-determinism per (seed, epoch, index)
    let cfg = AugmentConfig { p_rotate: 0.5, p_shift: 0.5, ..AugmentConfig::default() };
    let base = random_sample(&mut rng, 64, 64);
    for k in 0..30u64 {
        let run = || apply_pipeline(&base, &cfg, &mut RngStream::new(7, k / 5, k)).unwrap();
        check(run() == run(), format!("pipeline not deterministic at ({}, {k})", k / 5))?;
    }

    // trigger rates over 10,000 draws
    let cfg = AugmentConfig::default();
    let n = 10_000;
    let mut hits = [0usize; 8];
    let mut rotated = 0;
    for i in 0..n {
        let plan = AugmentPlan::draw(&cfg, &mut RngStream::new(3, 0, i as u64));
        let flags = [
            plan.noise_rgb.is_some(),
            plan.noise_tir.is_some(),
            plan.brightness.is_some(),
            plan.edge.is_some(),
            plan.blur.is_some(),
            plan.rotate_triggered,
            plan.shift_triggered,
            plan.one_sided,
        ];
        for (h, f) in hits.iter_mut().zip(flags) {
            *h += f as usize;
        }
        rotated += matches!(plan.geometric, Some(duodet::augment::GeoOp::Rotate { .. })) as usize;
    }
    let expected = [cfg.p_noise, cfg.p_noise, cfg.p_brightness, cfg.p_edge, cfg.p_blur, cfg.p_rotate, cfg.p_shift, cfg.p_one_sided];
    let names = ["noise_rgb", "noise_tir", "brightness", "edge", "blur", "rotate", "shift", "one_sided"];
    let mut worst_rate = 0.0f64;
    for ((h, p), name) in hits.iter().zip(expected).zip(names) {
        let r = *h as f64 / n as f64;
        check((r - p).abs() <= 0.02, format!("{name} rate {r:.4} vs {p}"))?;
        worst_rate = worst_rate.max((r - p).abs());
    }
    let rot = rotated as f64 / n as f64;
    check((rot - cfg.p_rotate).abs() <= 0.02, format!("applied rotation rate {rot:.4}"))?;
    Ok(format!("500 hulls min IoU {worst:.4}; one-sided and determinism exact; max rate deviation {worst_rate:.4}"))
}

// ---------------------------------------------------------------- mAP oracle

/// Brute force: re-match from scratch at every score threshold, then
/// interpolate over the 101 recall levels by direct search.
fn brute_force_ap(preds: &[Vec<BoundingBox<f64>>], gts: &[Vec<BoundingBox<f64>>], class: u32, thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = preds.iter().flatten().filter(|b| b.class_id == class).map(|b| b.score.unwrap()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut total) = (0usize, 0usize);
        for (p, g) in preds.iter().zip(gts) {
            let mut dets: Vec<&BoundingBox<f64>> = p.iter().filter(|b| b.class_id == class && b.score.unwrap() >= t).collect();
            dets.sort_by(|a, b| {
                b.score.unwrap().total_cmp(&a.score.unwrap()).then_with(|| {
                    (a.x_min, a.y_min, a.x_max, a.y_max).partial_cmp(&(b.x_min, b.y_min, b.x_max, b.y_max)).unwrap()
                })
            });
            let gt: Vec<&BoundingBox<f64>> = g.iter().filter(|b| b.class_id == class).collect();
            let mut taken = vec![false; gt.len()];
            for d in dets {
                total += 1;
                let best = (0..gt.len())
                    .filter(|&k| !taken[k] && iou(d, gt[k]) >= thr)
                    .fold(None, |acc: Option<usize>, k| match acc {
                        Some(j) if iou(d, gt[j]) >= iou(d, gt[k]) => Some(j),
                        _ => Some(k),
                    });
                if let Some(k) = best {
                    taken[k] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / total as f64, tp as f64 / n_gt as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        sum += points.iter().filter(|p| p.1 >= r).map(|p| p.0).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let nc = 3;
    let mut worst = 0.0f64;
    for scenario in 0..50 {
        let images = rng.random_range(1..=5);
        let mut gts = vec![Vec::new(); images];
        let mut preds = vec![Vec::new(); images];
        let n_gt = rng.random_range(1..=10);
        for _ in 0..n_gt {
            let i = rng.random_range(0..images);
            let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
            let (w, h) = (rng.random_range(5.0..30.0), rng.random_range(5.0..30.0));
            gts[i].push(BoundingBox::new(x, y, x + w, y + h, rng.random_range(0..nc)));
        }
        let n_pred = rng.random_range(0..=10);
        for _ in 0..n_pred {
            let i = rng.random_range(0..images);
            // half jittered copies of ground truth, half clutter; coarse scores force ties
            let b = if !gts[i].is_empty() && rng.random_bool(0.5) {
                let g: BoundingBox<f64> = gts[i][rng.random_range(0..gts[i].len())];
                let j = |v: f64, rng: &mut ChaCha8Rng| v + rng.random_range(-4.0..4.0);
                let (x0, y0) = (j(g.x_min, &mut rng), j(g.y_min, &mut rng));
                BoundingBox::new(x0, y0, x0.max(j(g.x_max, &mut rng)) + 1.0, y0.max(j(g.y_max, &mut rng)) + 1.0, g.class_id)
            } else {
                let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                BoundingBox::new(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0), rng.random_range(0..nc))
            };
            let score = if scenario % 2 == 0 { rng.random_range(1..=5) as f64 / 5.0 } else { rng.random_range(0.01..1.0) };
            preds[i].push(b.with_score(score));
        }
        let report = evaluate_map(&preds, &gts, nc as usize, 0.5).map_err(|e| e.to_string())?;
        let mut present = Vec::new();
        for c in 0..nc {
            let oracle = brute_force_ap(&preds, &gts, c, 0.5);
            match (report.per_class_ap[c as usize], oracle) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    present.push(b);
                }
                (None, None) => {}
                (a, b) => return Err(format!("scenario {scenario} class {c}: {a:?} vs oracle {b:?}")),
            }
        }
        let oracle_map = present.iter().sum::<f64>() / present.len() as f64;
        worst = worst.max((report.map - oracle_map).abs());
    }
    check(worst <= 1e-9, format!("max deviation {worst:e}"))?;

    let gts = vec![vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0), BoundingBox::new(20.0, 5.0, 45.0, 30.0, 1)], vec![BoundingBox::new(3.0, 3.0, 9.0, 19.0, 2)]];
    let perfect: Vec<Vec<_>> = gts.iter().map(|g| g.iter().map(|b| b.with_score(1.0)).collect()).collect();
    let one = evaluate_map(&perfect, &gts, 3, 0.5).map_err(|e| e.to_string())?.map;
    let zero = evaluate_map(&[vec![], vec![]], &gts, 3, 0.5).map_err(|e| e.to_string())?.map;
    check(one == 1.0 && zero == 0.0, format!("boundary cases gave {one} and {zero}"))?;
    Ok(format!("50 scenarios, max |evaluator - brute force| = {worst:.1e}; boundaries exactly 1.0 / 0.0"))
}

// ---------------------------------------------------------------- ensemble

fn ensemble() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let set: Vec<BoundingBox<f64>> = (0..12)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            BoundingBox::new(x, y, x + rng.random_range(3.0..40.0), y + rng.random_range(3.0..40.0), rng.random_range(0..3))
                .with_score(rng.random_range(0.01..1.0))
        })
        .collect();
    let key = |b: &BoundingBox<f64>| (b.score.unwrap().to_bits(), b.x_min.to_bits(), b.y_min.to_bits());
    let mut single = wbf(std::slice::from_ref(&set), &[1.0], 0.55).map_err(|e| e.to_string())?;
    let mut expect = set.clone();
    single.sort_by_key(key);
    expect.sort_by_key(key);
    check(single == expect, "single-model fusion changed boxes or scores")?;

    let dup = wbf(&[set.clone(), set.clone()], &[1.0, 1.0], 0.55).map_err(|e| e.to_string())?;
    let mut dup_coords: Vec<_> = dup.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max].map(f64::to_bits)).collect();
    let mut orig: Vec<_> = set.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max].map(f64::to_bits)).collect();
    dup_coords.sort();
    orig.sort();
    check(dup_coords == orig, "duplicated input moved coordinates")?;

    let b = BoundingBox::new(10.0, 10.0, 50.0, 40.0, 0);
    let r = wbf(&[vec![b.with_score(0.9)], vec![b.with_score(0.9)], vec![]], &[1.0, 1.0, 1.0], 0.55).map_err(|e| e.to_string())?;
    check(r.len() == 1, "3-model case should give one box")?;
    let dev = (r[0].score.unwrap() - 0.6).abs();
    check(dev <= 1e-9, format!("3-model discount score {} != 0.6", r[0].score.unwrap()))?;
    Ok(format!("single-model identity exact; duplicate coordinates exact; 3-model score off by {dev:.1e}"))
}

// ---------------------------------------------------------------- ingestion

fn ingestion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for (w, h, s, expect) in [
        (1280, 640, 640, vec![(0, 0), (640, 0)]),
        (640, 640, 640, vec![(0, 0)]),
        (1360, 765, 640, vec![(0, 62), (720, 62)]),
    ] {
        let got: Vec<_> = compute_crop_grid(w, h, s).map_err(|e| e.to_string())?.iter().map(|r| (r.x, r.y)).collect();
        check(got == expect, format!("{w}x{h} S={s}: {got:?}"))?;
    }
    for _ in 0..200 {
        let s = rng.random_range(16..200);
        let (w, h) = (rng.random_range(s..4 * s + 50), rng.random_range(s..4 * s + 50));
        let grid = compute_crop_grid(w, h, s).map_err(|e| e.to_string())?;
        let (nx, ny) = ((w / s).max(1), (h / s).max(1));
        check(grid.len() == nx * ny, format!("{w}x{h} S={s}: {} crops, want {}", grid.len(), nx * ny))?;
        check(grid.iter().all(|r| r.x + r.size <= w && r.y + r.size <= h), format!("{w}x{h} S={s}: crop out of bounds"))?;
        if nx > 1 {
            check(grid.iter().any(|r| r.x == 0) && grid.iter().any(|r| r.x + s == w), format!("{w}x{h} S={s}: x edges not covered"))?;
        }
        if ny > 1 {
            check(grid.iter().any(|r| r.y == 0) && grid.iter().any(|r| r.y + s == h), format!("{w}x{h} S={s}: y edges not covered"))?;
        }
    }
    // object only in the left half: the right crop is dropped
    let mut img = random_sample(&mut rng, 1280, 640);
    img.boxes = vec![BoundingBox::new(100.0, 100.0, 180.0, 160.0, 0)];
    let kept: Vec<CropRect> = compute_crop_grid(1280, 640, 640)
        .unwrap()
        .into_iter()
        .filter(|r| crop_sample(&img, *r, 0.25).unwrap().is_some())
        .collect();
    check(kept == vec![CropRect { x: 0, y: 0, size: 640 }], format!("kept crops {kept:?}"))?;
    // BT.601 per pixel
    let mut pixels = 0;
    for _ in 0..20 {
        let (w, h) = (rng.random_range(1..80), rng.random_range(1..80));
        let mut rgb = Image8::new(w, h, 3);
        rng.fill(rgb.data_mut());
        let gray = synthesize_tir(&rgb);
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (rgb.get(x, y, 0) as f64, rgb.get(x, y, 1) as f64, rgb.get(x, y, 2) as f64);
                let want = (0.299 * r + 0.587 * g + 0.114 * b).round() as u8;
                check(gray.get(x, y, 0) == want, format!("pixel ({x},{y}) {} != {want}", gray.get(x, y, 0)))?;
                pixels += 1;
            }
        }
    }
    Ok(format!("grid examples and 200 random grids ok; object-free crop excluded; {pixels} pixels match BT.601"))
}

// ---------------------------------------------------------------- end-to-end

fn smoke() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let bin = env!("CARGO_BIN_EXE_duodet");
    let run = |args: &[&str]| -> Result<String, String> {
        let o = Command::new(bin)
            .args(args)
            .env("DUODET_RUN_DIR", d.join("runs"))
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        let out = String::from_utf8_lossy(&o.stdout).into_owned();
        if o.status.code() != Some(0) {
            return Err(format!("`{}` exited {:?}: {}{}", args[0], o.status.code(), out, String::from_utf8_lossy(&o.stderr)));
        }
        Ok(out)
    };
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let fixture = core_dir().join("fixtures/toy");
    let data = d.join("data");
    run(&["prepare-data", "--input", &p(&fixture), "--format", "paired", "--crop-size", "128", "--out", &p(&data)])?;
    let toy = std::fs::read_to_string(core_dir().join("fixtures/toy_train.toml")).map_err(|e| e.to_string())?;
    let cfg = toy
        .replace("manifest = \"toy_prepared/manifest.jsonl\"", &format!("manifest = {:?}", p(&data.join("manifest.jsonl"))))
        .replace("max_steps = 1000", "max_steps = 50");
    std::fs::write(d.join("train.toml"), cfg).map_err(|e| e.to_string())?;
    run(&["train", "--config", &p(&d.join("train.toml"))])?;
    let ckpt = d.join("runs/last.ckpt");
    let eval = run(&["eval", "--checkpoint", &p(&ckpt), "--manifest", &p(&data.join("manifest.jsonl")), "--out", &p(&d.join("eval.det"))])?;
    let map: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("mAP@0.50 = "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or(format!("no parseable mAP line in: {eval}"))?;
    let rgb = std::fs::read_dir(data.join("rgb")).map_err(|e| e.to_string())?.next().ok_or("no prepared images")?.map_err(|e| e.to_string())?.path();
    let tir = data.join("tir").join(rgb.file_name().unwrap());
    run(&["infer", "--checkpoint", &p(&ckpt), "--rgb", &p(&rgb), "--tir", &p(&tir), "--out", &p(&d.join("one.det"))])?;
    run(&["ensemble", "--inputs", &p(&d.join("eval.det")), &p(&d.join("one.det")), "--weights", "1", "1", "--iou", "0.55", "--out", &p(&d.join("fused.det"))])?;
    let secs = start.elapsed();
    check(d.join("fused.det").exists(), "no fused output")?;
    check(secs < Duration::from_secs(300), format!("took {secs:?}"))?;
    Ok(format!("all five stages exit 0 in {:.0} s; mAP@0.50 after 50 steps = {map:.4}", secs.as_secs_f64()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("overfit", overfit),
        ("gradient suite", gradients),
        ("aux-branch equivalence", aux_equivalence),
        ("fusion zero-collapse", fusion),
        ("augmentation oracles", augmentation),
        ("mAP oracle", map_oracle),
        ("ensemble identity", ensemble),
        ("ingestion", ingestion),
        ("end-to-end smoke", smoke),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match r {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1} s]", t.elapsed().as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.1} s]", t.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
