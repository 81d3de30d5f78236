//! The assembled network: two backbones, per-level fusion, neck, and heads.
//!
//! ```text
//! rgb ─ backbone_rgb ─┬──────────────── aux_pre_rgb
//!                     ├─ fusion ─┬───── aux_post
//! tir ─ backbone_tir ─┤          └ neck ─ main
//!                     └──────────────── aux_pre_tir
//! ```

use crate::autodiff::{BatchStats, Var};
use crate::backbone::backbone;
use crate::error::{Error, Result};
use crate::fusion::fuse_pyramid;
use crate::heads::{detection_loss, head_forward, total_loss, AuxLosses, LossComponents, RawPredictions, TargetMap};
use crate::model::{Forward, HeadKind, Modality, Mode, ModelParams, Pyramid, LEVELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tape nodes of one detector pass.
#[derive(Debug, Clone)]
pub struct DetectorGraph {
    pub pre_rgb: Pyramid<Var>,
    pub pre_tir: Pyramid<Var>,
    pub fused: Pyramid<Var>,
    pub neck: Pyramid<Var>,
    /// Requested heads, in request order.
    pub heads: Vec<(HeadKind, Pyramid<Var>)>,
}

impl DetectorGraph {
    pub fn head(&self, kind: HeadKind) -> Option<&Pyramid<Var>> {
        self.heads.iter().find(|(k, _)| *k == kind).map(|(_, p)| p)
    }
}

/// Per-level `f + SiLU(conv3x3(f))`.
pub fn neck<T: Scalar>(fwd: &mut Forward<'_, T>, fused: &Pyramid<Var>) -> Result<Pyramid<Var>> {
    let mut out = Vec::with_capacity(3);
    for (level, &f) in fused.levels.iter().enumerate() {
        let w = fwd.param(&format!("neck.{}.conv.weight", LEVELS[level]))?;
        let y = fwd.tape.conv2d(f, w, None, 1, 1)?;
        let y = fwd.tape.silu(y);
        out.push(fwd.tape.add(f, y)?);
    }
    Ok(Pyramid::new(out[0], out[1], out[2]))
}

/// Records the network for `heads` on the tape. Inputs are `[N, 3, H, W]`.
pub fn build_detector<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    rgb: Var,
    tir: Var,
    heads: &[HeadKind],
) -> Result<DetectorGraph> {
    if fwd.value(rgb).shape() != fwd.value(tir).shape() {
        return Err(Error::Shape(format!(
            "RGB batch {:?} and TIR batch {:?} differ",
            fwd.value(rgb).shape(),
            fwd.value(tir).shape()
        )));
    }
    let pre_rgb = backbone(fwd, rgb, Modality::Rgb)?;
    let pre_tir = backbone(fwd, tir, Modality::Tir)?;
    let fused = fuse_pyramid(fwd, &pre_rgb, &pre_tir)?;
    let neck_out = neck(fwd, &fused)?;
    let mut out = Vec::with_capacity(heads.len());
    for &kind in heads {
        let input = match kind {
            HeadKind::Main => &neck_out,
            HeadKind::AuxPreRgb => &pre_rgb,
            HeadKind::AuxPreTir => &pre_tir,
            HeadKind::AuxPost => &fused,
        };
        let input = input.clone();
        out.push((kind, head_forward(fwd, &input, kind)?));
    }
    Ok(DetectorGraph { pre_rgb, pre_tir, fused, neck: neck_out, heads: out })
}

fn materialize<T: Scalar>(fwd: &Forward<'_, T>, p: &Pyramid<Var>) -> Result<RawPredictions<T>> {
    RawPredictions::new(p.map(|&v| fwd.value(v).clone()))
}

/// Main-head predictions in inference mode. Never reads auxiliary parameters.
pub fn predict<T: Scalar>(params: &ModelParams<T>, rgb: &Tensor<T>, tir: &Tensor<T>) -> Result<RawPredictions<T>> {
    let mut fwd = Forward::new(params, Mode::Eval, false);
    let r = fwd.input(rgb.clone(), false);
    let t = fwd.input(tir.clone(), false);
    let g = build_detector(&mut fwd, r, t, &[HeadKind::Main])?;
    materialize(&fwd, &g.heads[0].1)
}

/// Loss of every head evaluated in one pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadLosses<T> {
    pub main: LossComponents<T>,
    /// Zero when the model carries no auxiliary heads.
    pub aux: AuxLosses<T>,
    pub total: T,
}

/// Result of [`loss_and_grads`].
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub losses: HeadLosses<T>,
    /// Gradient of the total loss per trainable parameter index. Parameters
    /// the loss does not reach (including heads with zero weight) are absent.
    pub grads: Vec<(usize, Tensor<T>)>,
    /// Gradients with respect to the two input batches, when requested.
    pub input_grads: Option<(Tensor<T>, Tensor<T>)>,
    pub norm_stats: Vec<(String, BatchStats<T>)>,
}

/// Forward + loss (+ backward when `with_grads`) over one batch.
///
/// Auxiliary heads are evaluated whenever the model has them; only those with
/// a positive weight seed the backward pass.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    rgb: &Tensor<T>,
    tir: &Tensor<T>,
    targets: &[TargetMap],
    mode: Mode,
    with_grads: bool,
    input_grads: bool,
) -> Result<StepOutput<T>> {
    let weights = params.config().aux_weights;
    let mut heads = vec![HeadKind::Main];
    if params.has_aux() {
        heads.extend([HeadKind::AuxPreRgb, HeadKind::AuxPreTir, HeadKind::AuxPost]);
    }
    let mut fwd = Forward::new(params, mode, with_grads);
    let r = fwd.input(rgb.clone(), input_grads);
    let t = fwd.input(tir.clone(), input_grads);
    let g = build_detector(&mut fwd, r, t, &heads)?;
    let mut losses = HeadLosses::default();
    let mut seeds = Vec::new();
    for (kind, pyr) in &g.heads {
        let raw = materialize(&fwd, pyr)?;
        let l = detection_loss(&raw, targets)?;
        let weight = match kind {
            HeadKind::Main => 1.0,
            HeadKind::AuxPreRgb | HeadKind::AuxPreTir => weights.pre,
            HeadKind::AuxPost => weights.post,
        };
        match kind {
            HeadKind::Main => losses.main = l.components,
            HeadKind::AuxPreRgb => losses.aux.pre_rgb = l.components.total,
            HeadKind::AuxPreTir => losses.aux.pre_tir = l.components.total,
            HeadKind::AuxPost => losses.aux.post = l.components.total,
        }
        if weight > 0.0 && (with_grads || input_grads) {
            let w = T::lit(weight);
            for (level, grad) in l.grad.levels.into_iter().enumerate() {
                let grad = if weight == 1.0 { grad } else { grad.map(|v| v * w) };
                seeds.push((pyr.levels[level], grad));
            }
        }
    }
    losses.total = total_loss(losses.main.total, &losses.aux, &weights);
    let (grads, in_grads) = if seeds.is_empty() {
        (Vec::new(), None)
    } else {
        let grads = fwd.tape.backward(seeds)?;
        let pg = if with_grads { fwd.param_grads(&grads) } else { Vec::new() };
        let ig = if input_grads {
            let z = || Tensor::zeros(rgb.shape());
            Some((grads.get(r).cloned().unwrap_or_else(z), grads.get(t).cloned().unwrap_or_else(z)))
        } else {
            None
        };
        (pg, ig)
    };
    Ok(StepOutput { losses, grads, input_grads: in_grads, norm_stats: std::mem::take(&mut fwd.norm_stats) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::heads::assign_targets;
    use crate::model::{AuxWeights, BranchTag, ModelConfig, STRIDES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(aux: AuxWeights) -> ModelConfig {
        ModelConfig {
            stem_channels: 4,
            channels: [6, 8, 8],
            blocks_per_stage: 1,
            fusion_heads: 2,
            num_classes: 2,
            aux_weights: aux,
            ..Default::default()
        }
    }

    fn input(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, 3, s, s], (0..n * 3 * s * s).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn targets(n: usize, s: usize) -> Vec<TargetMap> {
        let grids = [(s / 8, s / 8), (s / 16, s / 16), (s / 32, s / 32)];
        (0..n)
            .map(|k| {
                let o = 4.0 * k as f64;
                assign_targets(
                    &[BoundingBox::new(6.0 + o, 8.0, 30.0 + o, 26.0, 0), BoundingBox::new(20.0, 30.0 + o, 60.0, 60.0, 1)],
                    grids,
                    STRIDES,
                )
            })
            .collect()
    }

    #[test]
    fn stripped_inference_is_bit_identical() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 3).unwrap();
        let s = p.strip_aux();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, t) = (input(&mut rng, 1, 64).cast::<f32>(), input(&mut rng, 1, 64).cast::<f32>());
        let a = predict(&p, &r, &t).unwrap();
        let b = predict(&s, &r, &t).unwrap();
        for (x, y) in a.levels.levels.iter().zip(&b.levels.levels) {
            assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn mismatched_modalities_rejected() {
        let p = ModelParams::<f64>::init(&cfg(AuxWeights::default()), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(predict(&p, &input(&mut rng, 1, 64), &input(&mut rng, 1, 32)).is_err());
    }

    #[test]
    fn aux_gradients_follow_their_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, t) = (input(&mut rng, 2, 64), input(&mut rng, 2, 64));
        let tg = targets(2, 64);
        let norms = |aux: AuxWeights| {
            let p = ModelParams::<f64>::init(&cfg(aux), 0).unwrap();
            let out = loss_and_grads(&p, &r, &t, &tg, Mode::Train, true, false).unwrap();
            let mut by_tag = std::collections::HashMap::new();
            for (idx, g) in &out.grads {
                *by_tag.entry(p.entries()[*idx].tag).or_insert(0.0) += g.sq_norm();
            }
            (out.losses, by_tag)
        };
        let (l0, off) = norms(AuxWeights { pre: 0.0, post: 0.0 });
        assert!(!off.contains_key(&BranchTag::HeadAuxPre) && !off.contains_key(&BranchTag::HeadAuxPost));
        assert_eq!(l0.total, l0.main.total);
        let (l1, on) = norms(AuxWeights { pre: 0.25, post: 0.25 });
        assert!(on[&BranchTag::HeadAuxPre] > 0.0 && on[&BranchTag::HeadAuxPost] > 0.0);
        for tag in [BranchTag::BackboneRgb, BranchTag::BackboneTir, BranchTag::Fusion, BranchTag::Neck, BranchTag::HeadMain] {
            assert!(on[&tag] > 0.0 && off[&tag] > 0.0, "{tag}");
        }
        assert_eq!(l1.main, l0.main);
        let (pre_only, _) = norms(AuxWeights { pre: 0.25, post: 0.0 });
        assert_eq!(pre_only.total, l0.main.total + 0.25 * (pre_only.aux.pre_rgb + pre_only.aux.pre_tir));
    }

    /// Central differences of the total training loss against the analytic
    /// gradient for coordinates of every branch.
    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, t) = (input(&mut rng, 2, 64), input(&mut rng, 2, 64));
        let tg = targets(2, 64);
        let p = ModelParams::<f64>::init(&cfg(AuxWeights::default()), 5).unwrap();
        let out = loss_and_grads(&p, &r, &t, &tg, Mode::Train, true, false).unwrap();
        let eps = 1e-4;
        for tag in BranchTag::ALL {
            let idxs: Vec<usize> = (0..p.entries().len()).filter(|&i| p.entries()[i].tag == tag && p.entries()[i].trainable()).collect();
            for _ in 0..3 {
                let idx = idxs[rng.random_range(0..idxs.len())];
                let k = rng.random_range(0..p.entries()[idx].value.numel());
                let eval = |d: f64| {
                    let mut q = p.clone();
                    q.entries_mut()[idx].value.data_mut()[k] += d;
                    loss_and_grads(&q, &r, &t, &tg, Mode::Train, false, false).unwrap().losses.total
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = out.grads.iter().find(|(i, _)| *i == idx).map(|(_, g)| g.data()[k]).unwrap_or(0.0);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "{} [{k}]: fd {fd} analytic {an}", p.entries()[idx].name);
            }
        }
    }
}
