//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every op records its inputs; [`Tape::backward`] walks the tape in reverse
//! and accumulates gradients. Losses are computed outside the tape and enter
//! as gradient seeds on the raw prediction tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{col2im_add, conv_out, im2col, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    /// Per-channel normalization. `batch_stats` selects whether mean/var depend on `x`.
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Silu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: T },
    MapToTokens { x: Var },
    TokensToMap { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { a: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running averages.
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input or parameter. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Square-kernel 2-D convolution over NCHW input; weights `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        check(wcin == cin && k == k2, || {
            format!("conv weight {:?} vs input {:?}", self.value(w).shape(), self.value(x).shape())
        })?;
        if let Some(b) = b {
            check(self.value(b).numel() == cout, || "conv bias length".into())?;
        }
        check(h + 2 * pad >= k && wd + 2 * pad >= k, || format!("input {h}x{wd} smaller than kernel"))?;
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let p = ho * wo;
        let kk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let od = out.data_mut();
            for s in 0..n {
                let xs = xv.sample(s);
                let src: &[T] = if direct {
                    xs
                } else {
                    im2col(xs, cin, h, wd, k, stride, pad, &mut cols);
                    &cols
                };
                T::gemm(cout, kk, p, T::one(), wv, false, src, false, T::zero(), &mut od[s * cout * p..(s + 1) * cout * p]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (co, &bc) in bv.iter().enumerate() {
                        for o in &mut od[(s * cout + co) * p..(s * cout + co + 1) * p] {
                            *o += bc;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Per-channel normalization of NCHW input. With `running = None` the
    /// statistics come from the batch and are returned; otherwise the given
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4();
        check(self.value(gamma).numel() == c && self.value(beta).numel() == c, || {
            format!("norm affine params for {c} channels")
        })?;
        let hw = h * w;
        let m = n * hw;
        let eps = T::lit(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var_b, stats) = match running {
            Some((rm, rv)) => {
                check(rm.len() == c && rv.len() == c, || "running stats length".into())?;
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::from_usize(m).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for smp in 0..n {
                        s += xv[(smp * c + ch) * hw..(smp * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut q = T::zero();
                    for smp in 0..n {
                        for &v in &xv[(smp * c + ch) * hw..(smp * c + ch + 1) * hw] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / mf;
                }
                let unbiased = if m > 1 {
                    let corr = mf / T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v * corr).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let od = out.data_mut();
        for smp in 0..n {
            for ch in 0..c {
                let r = (smp * c + ch) * hw..(smp * c + ch + 1) * hw;
                for i in r {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    od[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = running.is_none();
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, ng);
        Ok((v, stats))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v.sigmoid());
        let ng = self.ng(x);
        self.push(out, Op::Silu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check(self.value(a).shape() == self.value(b).shape(), || {
            format!("add {:?} + {:?}", self.value(a).shape(), self.value(b).shape())
        })?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, s }, ng)
    }

    /// `[N, C, H, W]` to `[N, H*W, C]`, positions in row-major order.
    pub fn map_to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let l = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..l {
                    out[(s * l + p) * c + ch] = xv[(s * c + ch) * l + p];
                }
            }
        }
        let t = Tensor::from_vec(&[n, l, c], out).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::MapToTokens { x }, ng)
    }

    /// Inverse of [`Tape::map_to_tokens`].
    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, l, c) = self.value(x).dims3();
        check(l == h * w, || format!("{l} tokens cannot form a {h}x{w} map"))?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for p in 0..l {
                for ch in 0..c {
                    out[(s * c + ch) * l + p] = xv[(s * l + p) * c + ch];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        let ng = self.ng(x);
        Ok(self.push(t, Op::TokensToMap { x }, ng))
    }

    /// `y = x W^T + b` over the last axis; `W` is `[Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let din = *xs.last().unwrap();
        let ws = self.value(w).shape();
        check(ws.len() == 2 && ws[1] == din, || format!("linear weight {ws:?} vs input {xs:?}"))?;
        let dout = ws[0];
        check(self.value(b).numel() == dout, || "linear bias length".into())?;
        let rows = self.value(x).numel() / din;
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&oshape);
        {
            let od = out.data_mut();
            let bv = self.value(b).data();
            for r in 0..rows {
                od[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
            T::gemm(rows, din, dout, T::one(), self.value(x).data(), false, self.value(w).data(), true, T::one(), od);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Concatenation along the last axis of two rank-3 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, l, da) = self.value(a).dims3();
        let (n2, l2, db) = self.value(b).dims3();
        check(n == n2 && l == l2, || "concat leading dims".into())?;
        let d = da + db;
        let mut out = vec![T::zero(); n * l * d];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for r in 0..n * l {
            out[r * d..r * d + da].copy_from_slice(&av[r * da..(r + 1) * da]);
            out[r * d + da..(r + 1) * d].copy_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[n, l, d], out).unwrap(), Op::Concat { a, b }, ng))
    }

    /// Scaled dot-product attention, heads split along the feature axis.
    /// `q` is `[N, Lq, D]`, `k` and `v` are `[N, Lk, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, lq, d) = self.value(q).dims3();
        let (nk, lk, dk) = self.value(k).dims3();
        check(self.value(v).shape() == self.value(k).shape(), || "attention k/v shapes".into())?;
        check(n == nk && d == dk, || format!("attention q {:?} vs k {:?}", self.value(q).shape(), self.value(k).shape()))?;
        check(heads > 0 && d % heads == 0, || format!("dim {d} not divisible by {heads} heads"))?;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); n * heads * lq * lk];
        let mut out = vec![T::zero(); n * lq * d];
        let mut qh = vec![T::zero(); lq * dh];
        let mut kh = vec![T::zero(); lk * dh];
        let mut vh = vec![T::zero(); lk * dh];
        let mut oh = vec![T::zero(); lq * dh];
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for s in 0..n {
            for hd in 0..heads {
                gather_head(&qv[s * lq * d..], lq, d, hd * dh, dh, &mut qh);
                gather_head(&kv[s * lk * d..], lk, d, hd * dh, dh, &mut kh);
                gather_head(&vv[s * lk * d..], lk, d, hd * dh, dh, &mut vh);
                let p = &mut probs[(s * heads + hd) * lq * lk..][..lq * lk];
                T::gemm(lq, dh, lk, scale, &qh, false, &kh, true, T::zero(), p);
                for row in p.chunks_exact_mut(lk) {
                    softmax_in_place(row);
                }
                T::gemm(lq, lk, dh, T::one(), p, false, &vh, false, T::zero(), &mut oh);
                scatter_head(&oh, lq, d, hd * dh, dh, &mut out[s * lq * d..]);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let t = Tensor::from_vec(&[n, lq, d], out).unwrap();
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Attention probabilities `[N, heads, Lq, Lk]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Backpropagates from the given output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            check(g.shape() == self.value(v).shape(), || {
                format!("seed {:?} for value {:?}", g.shape(), self.value(v).shape())
            })?;
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let (cout, _, k, _) = self.value(*w).dims4();
                let (_, _, ho, wo) = gy.dims4();
                let p = ho * wo;
                let kk = cin * k * k;
                let direct = k == 1 && *stride == 1 && *pad == 0;
                let gyd = gy.data();
                if let Some(b) = b {
                    if self.want(*b) {
                        let mut gb = Tensor::zeros(&[cout]);
                        for s in 0..n {
                            for co in 0..cout {
                                gb.data_mut()[co] += gyd[(s * cout + co) * p..(s * cout + co + 1) * p].iter().copied().sum::<T>();
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                let need_w = self.want(*w);
                let need_x = self.want(*x);
                let mut gw = if need_w { Some(Tensor::zeros(self.value(*w).shape())) } else { None };
                let mut gx = if need_x { Some(Tensor::zeros(self.value(*x).shape())) } else { None };
                let mut cols = vec![T::zero(); if direct { 0 } else { kk * p }];
                let mut dcols = vec![T::zero(); if need_x { kk * p } else { 0 }];
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                for s in 0..n {
                    let gys = &gyd[s * cout * p..(s + 1) * cout * p];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[T] = if direct {
                            xv.sample(s)
                        } else {
                            im2col(xv.sample(s), cin, h, wd, k, *stride, *pad, &mut cols);
                            &cols
                        };
                        T::gemm(cout, p, kk, T::one(), gys, false, src, true, T::one(), gw.data_mut());
                    }
                    if let Some(gx) = gx.as_mut() {
                        let per = cin * h * wd;
                        let gxs = &mut gx.data_mut()[s * per..(s + 1) * per];
                        if direct {
                            T::gemm(kk, cout, p, T::one(), wv, true, gys, false, T::one(), gxs);
                        } else {
                            T::gemm(kk, cout, p, T::one(), wv, true, gys, false, T::zero(), &mut dcols);
                            col2im_add(&dcols, cin, h, wd, k, *stride, *pad, gxs);
                        }
                    }
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[w.0], gw);
                }
                if let Some(gx) = gx {
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let g = self.value(*gamma).data();
                let gyd = gy.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                            sum_dy[ch] += gyd[i];
                            sum_dy_xhat[ch] += gyd[i] * xhat[i];
                        }
                    }
                }
                if self.want(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::from_vec(&[c], sum_dy_xhat.clone()).unwrap());
                }
                if self.want(*beta) {
                    accumulate(&mut grads[beta.0], Tensor::from_vec(&[c], sum_dy.clone()).unwrap());
                }
                if self.want(*x) {
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    let gxd = gx.data_mut();
                    for s in 0..n {
                        for ch in 0..c {
                            let k = g[ch] * inv_std[ch];
                            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                gxd[i] = if *batch_stats {
                                    k * (gyd[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * gyd[i]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                let mut gx = gy.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(xv) {
                    let s = v.sigmoid();
                    *g *= s * (T::one() + v * (T::one() - s));
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Add { a, b } => {
                if self.want(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
                if self.want(*b) {
                    accumulate(&mut grads[b.0], gy.clone());
                }
            }
            Op::Scale { x, s } => {
                accumulate(&mut grads[x.0], gy.map(|v| v * *s));
            }
            Op::MapToTokens { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let l = h * w;
                let gyd = gy.data();
                let mut out = vec![T::zero(); gyd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..l {
                            out[(s * c + ch) * l + p] = gyd[(s * l + p) * c + ch];
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], out).unwrap());
            }
            Op::TokensToMap { x } => {
                let (n, l, c) = self.value(*x).dims3();
                let gyd = gy.data();
                let mut out = vec![T::zero(); gyd.len()];
                for s in 0..n {
                    for p in 0..l {
                        for ch in 0..c {
                            out[(s * l + p) * c + ch] = gyd[(s * c + ch) * l + p];
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(&[n, l, c], out).unwrap());
            }
            Op::Linear { x, w, b } => {
                let din = *self.value(*x).shape().last().unwrap();
                let dout = self.value(*w).shape()[0];
                let rows = self.value(*x).numel() / din;
                let gyd = gy.data();
                if self.want(*b) {
                    let mut gb = Tensor::zeros(&[dout]);
                    for r in 0..rows {
                        for (o, &g) in gb.data_mut().iter_mut().zip(&gyd[r * dout..(r + 1) * dout]) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
                if self.want(*w) {
                    let mut gw = Tensor::zeros(&[dout, din]);
                    T::gemm(dout, rows, din, T::one(), gyd, true, self.value(*x).data(), false, T::zero(), gw.data_mut());
                    accumulate(&mut grads[w.0], gw);
                }
                if self.want(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    T::gemm(rows, dout, din, T::one(), gyd, false, self.value(*w).data(), false, T::zero(), gx.data_mut());
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Concat { a, b } => {
                let (n, l, da) = self.value(*a).dims3();
                let db = self.value(*b).dims3().2;
                let d = da + db;
                let gyd = gy.data();
                let mut ga = vec![T::zero(); n * l * da];
                let mut gb = vec![T::zero(); n * l * db];
                for r in 0..n * l {
                    ga[r * da..(r + 1) * da].copy_from_slice(&gyd[r * d..r * d + da]);
                    gb[r * db..(r + 1) * db].copy_from_slice(&gyd[r * d + da..(r + 1) * d]);
                }
                if self.want(*a) {
                    accumulate(&mut grads[a.0], Tensor::from_vec(&[n, l, da], ga).unwrap());
                }
                if self.want(*b) {
                    accumulate(&mut grads[b.0], Tensor::from_vec(&[n, l, db], gb).unwrap());
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, lq, d) = self.value(*q).dims3();
                let lk = self.value(*k).dims3().1;
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let gyd = gy.data();
                let mut gq = vec![T::zero(); n * lq * d];
                let mut gk = vec![T::zero(); n * lk * d];
                let mut gv = vec![T::zero(); n * lk * d];
                let mut qh = vec![T::zero(); lq * dh];
                let mut kh = vec![T::zero(); lk * dh];
                let mut vh = vec![T::zero(); lk * dh];
                let mut goh = vec![T::zero(); lq * dh];
                let mut dp = vec![T::zero(); lq * lk];
                let mut tmp_q = vec![T::zero(); lq * dh];
                let mut tmp_k = vec![T::zero(); lk * dh];
                for s in 0..n {
                    for hd in 0..*heads {
                        gather_head(&qv[s * lq * d..], lq, d, hd * dh, dh, &mut qh);
                        gather_head(&kv[s * lk * d..], lk, d, hd * dh, dh, &mut kh);
                        gather_head(&vv[s * lk * d..], lk, d, hd * dh, dh, &mut vh);
                        gather_head(&gyd[s * lq * d..], lq, d, hd * dh, dh, &mut goh);
                        let p = &probs[(s * heads + hd) * lq * lk..][..lq * lk];
                        // dV = P^T dO
                        T::gemm(lk, lq, dh, T::one(), p, true, &goh, false, T::zero(), &mut tmp_k);
                        scatter_head(&tmp_k, lk, d, hd * dh, dh, &mut gv[s * lk * d..]);
                        // dP = dO V^T, then softmax adjoint
                        T::gemm(lq, dh, lk, T::one(), &goh, false, &vh, true, T::zero(), &mut dp);
                        for (drow, prow) in dp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        T::gemm(lq, lk, dh, scale, &dp, false, &kh, false, T::zero(), &mut tmp_q);
                        scatter_head(&tmp_q, lq, d, hd * dh, dh, &mut gq[s * lq * d..]);
                        T::gemm(lk, lq, dh, scale, &dp, true, &qh, false, T::zero(), &mut tmp_k);
                        scatter_head(&tmp_k, lk, d, hd * dh, dh, &mut gk[s * lk * d..]);
                    }
                }
                if self.want(*q) {
                    accumulate(&mut grads[q.0], Tensor::from_vec(&[n, lq, d], gq).unwrap());
                }
                if self.want(*k) {
                    accumulate(&mut grads[k.0], Tensor::from_vec(&[n, lk, d], gk).unwrap());
                }
                if self.want(*v) {
                    accumulate(&mut grads[v.0], Tensor::from_vec(&[n, lk, d], gv).unwrap());
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.axpy(T::one(), &g),
        None => *slot = Some(g),
    }
}

fn gather_head<T: Scalar>(src: &[T], rows: usize, d: usize, off: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + off..r * d + off + dh]);
    }
}

fn scatter_head<T: Scalar>(src: &[T], rows: usize, d: usize, off: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * d + off..r * d + off + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(out * probe))/d(leaf) against central differences.
    fn fd_check(leaves: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let probe = rand_tensor(&mut rng, tape.value(out).shape());
        let grads = tape.backward(vec![(out, probe.clone())]).unwrap();
        let objective = |ls: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ls.iter().map(|x| t.leaf(x.clone(), true)).collect();
            let o = build(&mut t, &vs);
            t.value(o).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get(vars[li]).expect("gradient reaches every leaf");
            for idx in 0..leaf.numel().min(12) {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[idx] += eps;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[idx] -= eps;
                let num = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let ana = g.data()[idx];
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!((num - ana).abs() / denom < 1e-5, "leaf {li} idx {idx}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
            let x = rand_tensor(&mut rng, &[2, 3, 6, 5]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            fd_check(&[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), s, p).unwrap());
        }
    }

    #[test]
    fn batch_norm_gradients_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 2]);
        let g = rand_tensor(&mut rng, &[3]);
        let b = rand_tensor(&mut rng, &[3]);
        fd_check(&[x.clone(), g.clone(), b.clone()], |t, v| t.batch_norm(v[0], v[1], v[2], None).unwrap().0);
        let rm = [0.1, -0.2, 0.3];
        let rv = [1.5, 0.5, 2.0];
        fd_check(&[x, g, b], |t, v| t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv))).unwrap().0);
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let b = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        fd_check(&[a, b], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let s = t.silu(s);
            let s = t.scale(s, 0.7);
            let tok = t.map_to_tokens(s);
            t.tokens_to_map(tok, 2, 2).unwrap()
        });
    }

    #[test]
    fn linear_concat_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 5, 4]);
        let y = rand_tensor(&mut rng, &[2, 5, 4]);
        let w = rand_tensor(&mut rng, &[4, 8]);
        let b = rand_tensor(&mut rng, &[4]);
        fd_check(&[x, y, w, b], |t, v| {
            let q = t.attention(v[0], v[1], v[1], 2).unwrap();
            let c = t.concat(q, v[0]).unwrap();
            t.linear(c, v[2], v[3]).unwrap()
        });
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let q = t.leaf(rand_tensor(&mut rng, &[1, 7, 6]), false);
        let k = t.leaf(rand_tensor(&mut rng, &[1, 7, 6]), false);
        let a = t.attention(q, k, k, 3).unwrap();
        for row in t.attention_probs(a).unwrap().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[1, 3, 4, 4]), false);
        let w = t.leaf(Tensor::zeros(&[2, 2, 3, 3]), false);
        assert!(matches!(t.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
        let q = t.leaf(Tensor::zeros(&[1, 2, 6]), false);
        assert!(t.attention(q, q, q, 4).is_err());
    }
}
