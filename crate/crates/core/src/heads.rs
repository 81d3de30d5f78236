//! Anchor-free detection heads, target assignment, and the detection loss.
//!
//! Every head has the same structure per level: two 3x3 convolutions with SiLU,
//! then a 1x1 projection to `5 + num_classes` channels ordered
//! `tx, ty, tw, th, obj, class...`. A cell `(i, j)` at stride `s` decodes to
//! center `((j + σ(tx))·s, (i + σ(ty))·s)` and size `(e^tw·s, e^th·s)`.
//!
//! The main head reads the neck output. The auxiliary heads read the
//! per-modality pyramids (`aux_pre_rgb`, `aux_pre_tir`) and the fused pyramid
//! before the neck (`aux_post`); nothing downstream reads them, so removing
//! their parameters cannot change the main head's output.

use log::warn;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{box_convert_to_center, BoundingBox};
use crate::model::{AuxWeights, Forward, HeadKind, Mode, ModelParams, Pyramid, LEVELS, STRIDES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Exponent clamp applied to `tw`/`th` before `exp`.
pub const SIZE_LOGIT_CLAMP: f64 = 10.0;

/// Max-side brackets in pixels: below the first goes to P3, below the second to P4.
pub const SCALE_BRACKETS: [f64; 2] = [64.0, 128.0];

pub const BOX_GAIN: f64 = 5.0;
pub const OBJ_GAIN: f64 = 1.0;
pub const CLS_GAIN: f64 = 0.5;

/// Head output per level, `[N, 5 + num_classes, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions<T> {
    pub levels: Pyramid<Tensor<T>>,
}

impl<T: Scalar> RawPredictions<T> {
    pub fn new(levels: Pyramid<Tensor<T>>) -> Result<Self> {
        let (n, c, _, _) = levels.p3().dims4();
        if c < 6 {
            return Err(Error::Shape(format!("prediction maps need at least 6 channels, got {c}")));
        }
        for (l, t) in levels.levels.iter().enumerate() {
            if t.shape().len() != 4 || t.shape()[0] != n || t.shape()[1] != c {
                return Err(Error::Shape(format!("{} predictions have shape {:?}", LEVELS[l], t.shape())));
            }
        }
        Ok(Self { levels })
    }

    pub fn batch(&self) -> usize {
        self.levels.p3().shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.levels.p3().shape()[1] - 5
    }

    /// `(h, w)` of every level.
    pub fn grids(&self) -> [(usize, usize); 3] {
        self.levels.levels.each_ref().map(|t| (t.shape()[2], t.shape()[3]))
    }

    /// Image frame `(width, height)` implied by the P3 grid.
    pub fn frame(&self) -> (usize, usize) {
        let (h, w) = self.grids()[0];
        (w * STRIDES[0], h * STRIDES[0])
    }
}

/// Records head `kind` on the tape over `pyr`.
pub fn head_forward<T: Scalar>(fwd: &mut Forward<'_, T>, pyr: &Pyramid<Var>, kind: HeadKind) -> Result<Pyramid<Var>> {
    let cfg = fwd.params().config();
    let channels = cfg.channels;
    let mut out = Vec::with_capacity(3);
    for (level, &x) in pyr.levels.iter().enumerate() {
        let c = fwd.value(x).shape().get(1).copied().unwrap_or(0);
        if c != channels[level] {
            return Err(Error::Shape(format!(
                "{} head input at {} has {c} channels, expected {}",
                kind.as_str(),
                LEVELS[level],
                channels[level]
            )));
        }
        let base = format!("{}.{}", kind.prefix(), LEVELS[level]);
        let w1 = fwd.param(&format!("{base}.conv1.weight"))?;
        let y = fwd.tape.conv2d(x, w1, None, 1, 1)?;
        let y = fwd.tape.silu(y);
        let w2 = fwd.param(&format!("{base}.conv2.weight"))?;
        let y = fwd.tape.conv2d(y, w2, None, 1, 1)?;
        let y = fwd.tape.silu(y);
        let wp = fwd.param(&format!("{base}.pred.weight"))?;
        let bp = fwd.param(&format!("{base}.pred.bias"))?;
        out.push(fwd.tape.conv2d(y, wp, Some(bp), 1, 0)?);
    }
    Ok(Pyramid::new(out[0], out[1], out[2]))
}

/// Standalone head pass on materialized feature maps; `tag` is one of
/// `main`, `aux_pre_rgb`, `aux_pre_tir`, `aux_post`.
pub fn head_forward_tensors<T: Scalar>(
    params: &ModelParams<T>,
    pyr: &Pyramid<Tensor<T>>,
    tag: &str,
) -> Result<RawPredictions<T>> {
    let kind: HeadKind = tag.parse()?;
    let mut fwd = Forward::new(params, Mode::Eval, false);
    let vars = pyr.map(|t| fwd.input(t.clone(), false));
    let out = head_forward(&mut fwd, &vars, kind)?;
    RawPredictions::new(out.map(|&v| fwd.value(v).clone()))
}

fn cell_values<T: Scalar>(t: &Tensor<T>, n: usize, i: usize, j: usize) -> impl Fn(usize) -> T + '_ {
    let (_, c, h, w) = t.dims4();
    move |k| t.data()[((n * c + k) * h + i) * w + j]
}

/// Decodes `(tx, ty, tw, th)` at cell `(i, j)` of stride `s` to `(cx, cy, w, h)`.
pub fn decode_cell<T: Scalar>(t: [T; 4], i: usize, j: usize, s: usize) -> [T; 4] {
    let s = T::from_usize(s).unwrap();
    let lim = T::lit(SIZE_LOGIT_CLAMP);
    [
        (T::from_usize(j).unwrap() + t[0].sigmoid()) * s,
        (T::from_usize(i).unwrap() + t[1].sigmoid()) * s,
        t[2].max(-lim).min(lim).exp() * s,
        t[3].max(-lim).min(lim).exp() * s,
    ]
}

/// Scored boxes of image `n` with `score ≥ conf_thresh`, clipped to the frame.
///
/// Score is `σ(obj) · max_c σ(class_c)`; the box takes the arg-max class.
/// Boxes that clip to zero extent are dropped.
pub fn decode<T: Scalar>(raw: &RawPredictions<T>, n: usize, conf_thresh: T) -> Vec<BoundingBox<T>> {
    let (fw, fh) = raw.frame();
    let (fw, fh) = (T::from_usize(fw).unwrap(), T::from_usize(fh).unwrap());
    let nc = raw.num_classes();
    let mut out = Vec::new();
    for (level, t) in raw.levels.levels.iter().enumerate() {
        let (_, _, h, w) = t.dims4();
        for i in 0..h {
            for j in 0..w {
                let v = cell_values(t, n, i, j);
                let obj = v(4).sigmoid();
                let (mut best, mut cls) = (v(5), 0);
                for k in 1..nc {
                    if v(5 + k) > best {
                        best = v(5 + k);
                        cls = k;
                    }
                }
                let score = obj * best.sigmoid();
                if score.is_nan() || score < conf_thresh {
                    continue;
                }
                let [cx, cy, bw, bh] = decode_cell([v(0), v(1), v(2), v(3)], i, j, STRIDES[level]);
                let b = BoundingBox::new(
                    (cx - bw * T::half()).max(T::zero()).min(fw),
                    (cy - bh * T::half()).max(T::zero()).min(fh),
                    (cx + bw * T::half()).max(T::zero()).min(fw),
                    (cy + bh * T::half()).max(T::zero()).min(fh),
                    cls as u32,
                );
                if b.x_max > b.x_min && b.y_max > b.y_min {
                    out.push(b.with_score(score));
                }
            }
        }
    }
    out
}

/// Ground truth placed on one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    /// Index into the ground-truth list given to [`assign_targets`].
    pub gt_index: usize,
    pub gt: BoundingBox<f64>,
    /// `(tx, ty, tw, th)` that decode to `gt` at this cell (offsets clamped when
    /// the cell does not contain the center).
    pub encoded: [f64; 4],
}

/// Targets of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    /// Row-major `h*w` cells; `Some` marks a positive.
    pub cells: Vec<Option<CellTarget>>,
}

impl LevelTargets {
    pub fn positive_mask(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }

    pub fn objectness(&self) -> Vec<f64> {
        self.cells.iter().map(|c| if c.is_some() { 1.0 } else { 0.0 }).collect()
    }

    pub fn class_targets(&self) -> Vec<Option<u32>> {
        self.cells.iter().map(|c| c.map(|c| c.gt.class_id)).collect()
    }
}

/// Targets of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub levels: [LevelTargets; 3],
    /// Boxes that found no free cell.
    pub dropped: usize,
}

impl TargetMap {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.cells.iter().flatten().count()).sum()
    }

    /// `(level, row, col)` of every positive, in scan order.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, usize, &CellTarget)> + '_ {
        self.levels.iter().enumerate().flat_map(|(l, lt)| {
            lt.cells.iter().enumerate().filter_map(move |(k, c)| c.as_ref().map(|c| (l, k / lt.w, k % lt.w, c)))
        })
    }
}

/// Level of a box by its longest side.
pub fn scale_for(b: &BoundingBox<f64>) -> usize {
    let side = b.width().max(b.height());
    if side < SCALE_BRACKETS[0] {
        0
    } else if side < SCALE_BRACKETS[1] {
        1
    } else {
        2
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Inverse of [`decode_cell`] at cell `(i, j)`.
pub fn encode_box(b: &BoundingBox<f64>, i: usize, j: usize, stride: usize) -> [f64; 4] {
    let c = box_convert_to_center(b);
    let s = stride as f64;
    [logit(c.cx / s - j as f64), logit(c.cy / s - i as f64), (c.w / s).ln(), (c.h / s).ln()]
}

/// Places every ground-truth box on one `(level, cell)`.
///
/// Larger boxes claim cells first; a box whose cell is taken moves to the
/// nearest free 8-neighbor (by distance from its center), else it is dropped
/// and counted.
pub fn assign_targets(gt: &[BoundingBox<f64>], grids: [(usize, usize); 3], strides: [usize; 3]) -> TargetMap {
    let mut levels = [0, 1, 2].map(|l| LevelTargets {
        h: grids[l].0,
        w: grids[l].1,
        stride: strides[l],
        cells: vec![None; grids[l].0 * grids[l].1],
    });
    let mut order: Vec<usize> = (0..gt.len()).collect();
    // stable: equal areas keep input order
    order.sort_by(|&a, &b| gt[b].area().partial_cmp(&gt[a].area()).unwrap_or(std::cmp::Ordering::Equal));
    let mut dropped = 0;
    for gi in order {
        let b = &gt[gi];
        let lt = &mut levels[scale_for(b)];
        if lt.h == 0 || lt.w == 0 {
            dropped += 1;
            continue;
        }
        let s = lt.stride as f64;
        let c = box_convert_to_center(b);
        let (fx, fy) = (c.cx / s, c.cy / s);
        let i0 = (fy.floor().max(0.0) as usize).min(lt.h - 1);
        let j0 = (fx.floor().max(0.0) as usize).min(lt.w - 1);
        let mut cell = None;
        if lt.cells[i0 * lt.w + j0].is_none() {
            cell = Some((i0, j0));
        } else {
            let mut best = f64::INFINITY;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (i, j) = (i0 as i64 + di, j0 as i64 + dj);
                    if (di, dj) == (0, 0) || i < 0 || j < 0 || i >= lt.h as i64 || j >= lt.w as i64 {
                        continue;
                    }
                    let (i, j) = (i as usize, j as usize);
                    if lt.cells[i * lt.w + j].is_some() {
                        continue;
                    }
                    let d = (j as f64 + 0.5 - fx).powi(2) + (i as f64 + 0.5 - fy).powi(2);
                    if d < best {
                        best = d;
                        cell = Some((i, j));
                    }
                }
            }
        }
        match cell {
            Some((i, j)) => {
                lt.cells[i * lt.w + j] = Some(CellTarget { gt_index: gi, gt: *b, encoded: encode_box(b, i, j, lt.stride) });
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        warn!("{dropped} ground-truth box(es) dropped: no free cell");
    }
    TargetMap { levels, dropped }
}

/// Loss components of one head.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents<T> {
    pub box_loss: T,
    pub obj: T,
    pub cls: T,
    pub total: T,
}

/// Loss value plus its gradient with respect to every raw prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss<T> {
    pub components: LossComponents<T>,
    pub grad: Pyramid<Tensor<T>>,
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 - IoU(pred, gt)` for center-form `pred`, and its gradient w.r.t. `(cx, cy, w, h)`.
fn iou_loss<T: Scalar>(p: [T; 4], g: &BoundingBox<T>) -> (T, [T; 4]) {
    let h2 = T::half();
    let (x1, x2) = (p[0] - p[2] * h2, p[0] + p[2] * h2);
    let (y1, y2) = (p[1] - p[3] * h2, p[1] + p[3] * h2);
    let iw = x2.min(g.x_max) - x1.max(g.x_min);
    let ih = y2.min(g.y_max) - y1.max(g.y_min);
    let ap = p[2] * p[3];
    let ag = g.area();
    let zero = T::zero();
    if iw <= zero || ih <= zero {
        return (T::one(), [zero; 4]);
    }
    let inter = iw * ih;
    let union = ap + ag - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_ap = -inter / (union * union);
    // d inter / d corner
    let dx1 = if x1 > g.x_min { -ih } else { zero };
    let dx2 = if x2 < g.x_max { ih } else { zero };
    let dy1 = if y1 > g.y_min { -iw } else { zero };
    let dy2 = if y2 < g.y_max { iw } else { zero };
    // corners -> center form; A_p = w*h
    let g_cx = d_inter * (dx1 + dx2);
    let g_cy = d_inter * (dy1 + dy2);
    let g_w = d_inter * (dx2 - dx1) * h2 + d_ap * p[3];
    let g_h = d_inter * (dy2 - dy1) * h2 + d_ap * p[2];
    (T::one() - iou, [-g_cx, -g_cy, -g_w, -g_h])
}

/// Detection loss over a batch: `5·box + obj + 0.5·cls`.
///
/// * box: mean over positives of `1 − IoU(decoded, gt)`;
/// * obj: mean binary cross-entropy over every cell of every level and image;
/// * cls: mean binary cross-entropy over positives × classes.
///
/// Without positives box and cls are exactly zero.
pub fn detection_loss<T: Scalar>(raw: &RawPredictions<T>, targets: &[TargetMap]) -> Result<DetectionLoss<T>> {
    let n = raw.batch();
    if targets.len() != n {
        return Err(Error::Shape(format!("{} target maps for a batch of {n}", targets.len())));
    }
    let grids = raw.grids();
    for t in targets {
        for (l, lt) in t.levels.iter().enumerate() {
            if (lt.h, lt.w) != grids[l] {
                return Err(Error::Shape(format!(
                    "{} targets are {}x{}, predictions {}x{}",
                    LEVELS[l], lt.h, lt.w, grids[l].0, grids[l].1
                )));
            }
        }
    }
    let nc = raw.num_classes();
    let np = 5 + nc;
    let mut grad = raw.levels.map(|t| Tensor::zeros(t.shape()));
    let cells: usize = grids.iter().map(|(h, w)| h * w).sum::<usize>() * n;
    let positives: usize = targets.iter().map(TargetMap::num_positives).sum();
    let lit = |v: usize| T::from_usize(v).unwrap();

    // objectness over every cell
    let inv_cells = T::one() / lit(cells.max(1));
    let mut obj = T::zero();
    for l in 0..3 {
        let (h, w) = grids[l];
        let t = &raw.levels.levels[l];
        let g = grad.levels[l].data_mut();
        for (b, tm) in targets.iter().enumerate() {
            for k in 0..h * w {
                let idx = ((b * np + 4) * h) * w + k;
                let x = t.data()[idx];
                let y = if tm.levels[l].cells[k].is_some() { T::one() } else { T::zero() };
                obj += softplus(x) - y * x;
                g[idx] = T::lit(OBJ_GAIN) * (x.sigmoid() - y) * inv_cells;
            }
        }
    }
    obj *= inv_cells;

    let (mut box_loss, mut cls) = (T::zero(), T::zero());
    if positives > 0 {
        let inv_pos = T::one() / lit(positives);
        let inv_cls = T::one() / lit(positives * nc);
        let (gb, gc) = (T::lit(BOX_GAIN), T::lit(CLS_GAIN));
        for (b, tm) in targets.iter().enumerate() {
            for (l, i, j, ct) in tm.positives() {
                let t = &raw.levels.levels[l];
                let (h, w) = grids[l];
                let at = |k: usize| ((b * np + k) * h + i) * w + j;
                let v = cell_values(t, b, i, j);
                let raw4 = [v(0), v(1), v(2), v(3)];
                let p = decode_cell(raw4, i, j, STRIDES[l]);
                let (li, dp) = iou_loss(p, &ct.gt.cast::<T>());
                box_loss += li;
                let s = lit(STRIDES[l]);
                let lim = T::lit(SIZE_LOGIT_CLAMP);
                let dsize = |r: T, size: T| if r.abs() < lim { size } else { T::zero() };
                let chain = [
                    dp[0] * s * raw4[0].sigmoid() * (T::one() - raw4[0].sigmoid()),
                    dp[1] * s * raw4[1].sigmoid() * (T::one() - raw4[1].sigmoid()),
                    dp[2] * dsize(raw4[2], p[2]),
                    dp[3] * dsize(raw4[3], p[3]),
                ];
                let g = grad.levels[l].data_mut();
                for (k, d) in chain.into_iter().enumerate() {
                    g[at(k)] += gb * d * inv_pos;
                }
                for c in 0..nc {
                    let x = v(5 + c);
                    let y = if ct.gt.class_id as usize == c { T::one() } else { T::zero() };
                    cls += softplus(x) - y * x;
                    g[at(5 + c)] += gc * (x.sigmoid() - y) * inv_cls;
                }
            }
        }
        box_loss *= inv_pos;
        cls *= inv_cls;
    }
    let total = T::lit(BOX_GAIN) * box_loss + T::lit(OBJ_GAIN) * obj + T::lit(CLS_GAIN) * cls;
    Ok(DetectionLoss { components: LossComponents { box_loss, obj, cls, total }, grad })
}

/// Per-head losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AuxLosses<T> {
    pub pre_rgb: T,
    pub pre_tir: T,
    pub post: T,
}

/// `L_main + λ_pre·(L_pre_rgb + L_pre_tir) + λ_post·L_post`.
pub fn total_loss<T: Scalar>(main: T, aux: &AuxLosses<T>, weights: &AuxWeights) -> T {
    main + T::lit(weights.pre) * (aux.pre_rgb + aux.pre_tir) + T::lit(weights.post) * aux.post
}

/// Removes the auxiliary heads from `params`. Idempotent.
pub fn strip_aux<T: Scalar>(params: &ModelParams<T>) -> ModelParams<T> {
    params.strip_aux()
}
