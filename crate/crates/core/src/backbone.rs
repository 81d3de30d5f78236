//! Per-modality convolutional feature extractor.
//!
//! Stem: two stride-2 conv/norm/SiLU layers. Then three stages, each a stride-2
//! downsample followed by residual blocks `x + SiLU(norm(conv(SiLU(norm(conv(x))))))`.
//! Stage outputs are P3, P4, P5 at strides 8, 16, 32. The RGB and TIR
//! extractors share the structure but not the weights.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{Forward, Modality, Mode, ModelParams, Pyramid};
use crate::raster::Image8;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Builds an NCHW batch scaled to `[0, 1]`; single-channel images are replicated
/// to three channels.
pub fn image_batch<T: Scalar>(images: &[&Image8]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let hw = w * h;
    let mut data = vec![T::zero(); images.len() * 3 * hw];
    let inv = T::lit(1.0 / 255.0);
    for (n, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} with {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        let c = img.channels();
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("unsupported channel count {c}")));
        }
        let px = img.data();
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            let plane = &mut data[(n * 3 + ch) * hw..(n * 3 + ch + 1) * hw];
            for (i, o) in plane.iter_mut().enumerate() {
                *o = T::from_u8(px[i * c + src]).unwrap() * inv;
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Records the extractor for `modality` on the tape.
pub fn backbone<T: Scalar>(fwd: &mut Forward<'_, T>, x: Var, modality: Modality) -> Result<Pyramid<Var>> {
    let (_, c, h, w) = fwd.value(x).dims4();
    if c != 3 {
        return Err(Error::Shape(format!("backbone expects 3 input channels, got {c}")));
    }
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {h}x{w} must be a positive multiple of 32 on both sides")));
    }
    let tag = modality.tag();
    let blocks = fwd.params().config().blocks_per_stage;
    let mut y = x;
    for i in 0..2 {
        y = fwd.conv_norm(y, &format!("{tag}.stem.{i}"), 2)?;
        y = fwd.tape.silu(y);
    }
    let mut outs = Vec::with_capacity(3);
    for stage in 1..=3 {
        let base = format!("{tag}.stage{stage}");
        y = fwd.conv_norm(y, &format!("{base}.down"), 2)?;
        y = fwd.tape.silu(y);
        for b in 0..blocks {
            let r = fwd.conv_norm(y, &format!("{base}.block{b}.0"), 1)?;
            let r = fwd.tape.silu(r);
            let r = fwd.conv_norm(r, &format!("{base}.block{b}.1"), 1)?;
            let r = fwd.tape.silu(r);
            y = fwd.tape.add(y, r)?;
        }
        outs.push(y);
    }
    Ok(Pyramid::new(outs[0], outs[1], outs[2]))
}

/// Standalone extractor pass returning materialized feature maps.
pub fn backbone_forward<T: Scalar>(
    params: &ModelParams<T>,
    input: &Tensor<T>,
    modality: Modality,
    mode: Mode,
) -> Result<Pyramid<Tensor<T>>> {
    let mut fwd = Forward::new(params, mode, false);
    let x = fwd.input(input.clone(), false);
    let pyr = backbone(&mut fwd, x, modality)?;
    Ok(pyr.map(|&v| fwd.value(v).clone()))
}
