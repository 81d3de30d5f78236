//! Bidirectional cross-modal attention fusion, one block per pyramid level.
//!
//! For each level both maps are flattened to token sequences and projected to
//! the fusion width. RGB tokens attend to TIR tokens and vice versa; each
//! direction adds its attention output to its own projected tokens. The two
//! results are concatenated, projected back to the level's channel count, and
//! added to the mean of the two input maps:
//!
//! ```text
//! u = P_rgb(f_rgb) + Attn_rgb(Q = P_rgb(f_rgb), KV = P_tir(f_tir))
//! v = P_tir(f_tir) + Attn_tir(Q = P_tir(f_tir), KV = P_rgb(f_rgb))
//! fused = Out([u, v]) + (f_rgb + f_tir) / 2
//! ```
//!
//! With every fusion weight at zero the block reduces to the mean path exactly.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelParams, Pyramid, LEVELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flattened feature map of one sample: `N = h*w` rows of width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// `[h*w, D]`, row-major over spatial positions.
    pub tokens: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Spatial position `(row, col)` of token `k`.
    pub fn position(&self, k: usize) -> (usize, usize) {
        (k / self.w, k % self.w)
    }
}

/// `[C, h, w]` map to tokens; token `k` is position `(k / w, k % w)`.
pub fn tokens_from_map<T: Scalar>(map: &Tensor<T>) -> Result<TokenSequence<T>> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected a [C, h, w] map, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = map.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = src[ch * h * w + p];
        }
    }
    Ok(TokenSequence { tokens: Tensor::from_vec(&[h * w, c], out)?, h, w })
}

pub fn map_from_tokens<T: Scalar>(t: &TokenSequence<T>) -> Result<Tensor<T>> {
    let s = t.tokens.shape();
    if s.len() != 2 || s[0] != t.h * t.w {
        return Err(Error::Shape(format!("{s:?} tokens cannot form a {}x{} map", t.h, t.w)));
    }
    let c = s[1];
    let l = s[0];
    let src = t.tokens.data();
    let mut out = vec![T::zero(); c * l];
    for p in 0..l {
        for ch in 0..c {
            out[ch * l + p] = src[p * c + ch];
        }
    }
    Tensor::from_vec(&[c, t.h, t.w], out)
}

/// Projection weights of one attention direction, `[D, D]` matrices and `[D]` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

/// Bound projection variables `[wq, bq, wk, bk, wv, bv, wo, bo]`.
type AttnVars = [Var; 8];

/// Output-projected multi-head attention with queries from `q_src` and keys
/// and values from `kv_src` (both `[N, L, D]` on the tape). Returns the output
/// and the raw attention node (for inspecting probabilities).
fn attend<T: Scalar>(tape: &mut Tape<T>, q_src: Var, kv_src: Var, w: AttnVars, heads: usize) -> Result<(Var, Var)> {
    if tape.value(q_src).shape() != tape.value(kv_src).shape() {
        return Err(Error::Shape(format!(
            "cross attention needs equal token shapes, got {:?} and {:?}",
            tape.value(q_src).shape(),
            tape.value(kv_src).shape()
        )));
    }
    let q = tape.linear(q_src, w[0], w[1])?;
    let k = tape.linear(kv_src, w[2], w[3])?;
    let v = tape.linear(kv_src, w[4], w[5])?;
    let a = tape.attention(q, k, v, heads)?;
    Ok((tape.linear(a, w[6], w[7])?, a))
}

/// Standalone cross attention. Returns the output tokens and the attention
/// probabilities `[heads, N, N]`.
pub fn cross_attention<T: Scalar>(
    q_src: &TokenSequence<T>,
    kv_src: &TokenSequence<T>,
    weights: &AttentionWeights<T>,
    heads: usize,
) -> Result<(TokenSequence<T>, Vec<T>)> {
    if q_src.tokens.shape() != kv_src.tokens.shape() {
        return Err(Error::Shape(format!(
            "cross attention needs equal N and D, got {:?} and {:?}",
            q_src.tokens.shape(),
            kv_src.tokens.shape()
        )));
    }
    let (l, d) = (q_src.len(), q_src.dim());
    let mut tape = Tape::new();
    let q = tape.leaf(q_src.tokens.clone().reshaped(&[1, l, d])?, false);
    let kv = tape.leaf(kv_src.tokens.clone().reshaped(&[1, l, d])?, false);
    let ws = [&weights.wq, &weights.bq, &weights.wk, &weights.bk, &weights.wv, &weights.bv, &weights.wo, &weights.bo];
    let vars: Vec<Var> = ws.iter().map(|t| tape.leaf((*t).clone(), false)).collect();
    let (out, a) = attend(&mut tape, q, kv, vars.try_into().unwrap(), heads)?;
    let probs = tape.attention_probs(a).unwrap().to_vec();
    let tokens = tape.value(out).clone().reshaped(&[l, d])?;
    Ok((TokenSequence { tokens, h: q_src.h, w: q_src.w }, probs))
}

fn bind_attn<T: Scalar>(fwd: &mut Forward<'_, T>, prefix: &str) -> Result<AttnVars> {
    let mut out = Vec::with_capacity(8);
    for p in ["q", "k", "v", "o"] {
        out.push(fwd.param(&format!("{prefix}.{p}.weight"))?);
        out.push(fwd.param(&format!("{prefix}.{p}.bias"))?);
    }
    Ok(out.try_into().unwrap())
}

/// Tape nodes of one level's fusion, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct ScaleFusion {
    pub fused: Var,
    /// Attention nodes of the RGB-query and TIR-query directions.
    pub attention: [Var; 2],
}

/// Fuses one level; inputs are `[N, C, h, w]` maps on the tape.
pub fn fuse_scale<T: Scalar>(fwd: &mut Forward<'_, T>, level: usize, f_rgb: Var, f_tir: Var) -> Result<ScaleFusion> {
    let (rs, ts) = (fwd.value(f_rgb).shape().to_vec(), fwd.value(f_tir).shape().to_vec());
    if rs != ts {
        return Err(Error::Shape(format!("modalities disagree at {}: {rs:?} vs {ts:?}", LEVELS[level])));
    }
    let (h, w) = (rs[2], rs[3]);
    let heads = fwd.params().config().fusion_heads;
    let base = format!("fusion.{}", LEVELS[level]);
    let tr = fwd.tape.map_to_tokens(f_rgb);
    let tt = fwd.tape.map_to_tokens(f_tir);
    let pr = fwd.linear(tr, &format!("{base}.proj_rgb"))?;
    let pt = fwd.linear(tt, &format!("{base}.proj_tir"))?;
    let wr = bind_attn(fwd, &format!("{base}.attn_rgb"))?;
    let wt = bind_attn(fwd, &format!("{base}.attn_tir"))?;
    let (ar, attn_r) = attend(&mut fwd.tape, pr, pt, wr, heads)?;
    let (at, attn_t) = attend(&mut fwd.tape, pt, pr, wt, heads)?;
    let u = fwd.tape.add(pr, ar)?;
    let v = fwd.tape.add(pt, at)?;
    let uv = fwd.tape.concat(u, v)?;
    let o = fwd.linear(uv, &format!("{base}.out"))?;
    let o = fwd.tape.tokens_to_map(o, h, w)?;
    let sum = fwd.tape.add(f_rgb, f_tir)?;
    let mean = fwd.tape.scale(sum, T::half());
    let fused = fwd.tape.add(o, mean)?;
    Ok(ScaleFusion { fused, attention: [attn_r, attn_t] })
}

/// Fuses all three levels with per-level parameters.
pub fn fuse_pyramid<T: Scalar>(fwd: &mut Forward<'_, T>, rgb: &Pyramid<Var>, tir: &Pyramid<Var>) -> Result<Pyramid<Var>> {
    let mut out = Vec::with_capacity(3);
    for level in 0..3 {
        out.push(fuse_scale(fwd, level, rgb.levels[level], tir.levels[level])?.fused);
    }
    Ok(Pyramid::new(out[0], out[1], out[2]))
}

/// Standalone single-level fusion on materialized maps.
pub fn fuse_scale_tensors<T: Scalar>(
    params: &ModelParams<T>,
    level: usize,
    f_rgb: &Tensor<T>,
    f_tir: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut fwd = Forward::new(params, crate::model::Mode::Eval, false);
    let r = fwd.input(f_rgb.clone(), false);
    let t = fwd.input(f_tir.clone(), false);
    let out = fuse_scale(&mut fwd, level, r, t)?;
    Ok(fwd.value(out.fused).clone())
}
