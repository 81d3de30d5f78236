//! Seeded paired-modality augmentation.
//!
//! Photometric ops run first and never touch boxes: Gaussian noise on each
//! modality, brightness on RGB, unsharp-mask edge enhancement and blur on TIR.
//! Then at most one geometric op, rotation or shift (rotation wins when both
//! trigger), applied either to both modalities or, to simulate
//! misregistration, to a single one. One-sided ops leave the boxes alone: the
//! labels stay aligned with the untouched modality.
//!
//! Every decision comes from an [`RngStream`] keyed by
//! `(global_seed, epoch, sample_index)`, consumed in the order documented on
//! [`AugmentPlan::draw`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, clip_box_to_rect, BoundingBox};
use crate::raster::{Image8, PairedSample, SampleMeta};
use crate::rng::stable_hash;

/// Augmentation settings; the `aug` table of the training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    /// Degrees, `[lo, hi]`.
    pub rotate_range: [f64; 2],
    pub p_shift: f64,
    /// Pixels per axis, `[lo, hi]` inclusive.
    pub shift_range: [i32; 2],
    pub p_noise: f64,
    /// Upper bound of the per-image noise standard deviation (gray levels).
    pub noise_sigma: f64,
    pub p_brightness: f64,
    /// Multiplicative factor range.
    pub brightness_range: [f64; 2],
    pub p_edge: f64,
    pub edge_strength: [f64; 2],
    pub p_blur: f64,
    pub blur_sigma_range: [f64; 2],
    pub p_mosaic: f64,
    /// Probability that a geometric op targets a single modality.
    pub p_one_sided: f64,
    pub min_area_frac: f64,
    pub global_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotate: 0.3,
            rotate_range: [-5.0, 5.0],
            p_shift: 0.3,
            shift_range: [-10, 10],
            p_noise: 0.3,
            noise_sigma: 10.0,
            p_brightness: 0.3,
            brightness_range: [0.6, 1.4],
            p_edge: 0.3,
            edge_strength: [0.5, 1.5],
            p_blur: 0.3,
            blur_sigma_range: [0.5, 1.5],
            p_mosaic: 0.5,
            p_one_sided: 0.5,
            min_area_frac: crate::geometry::DEFAULT_MIN_AREA_FRAC,
            global_seed: 0,
        }
    }
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: format!("aug.{field}"), message: message.into() }
}

impl AugmentConfig {
    /// Every probability zero: the pipeline becomes the identity.
    pub fn disabled() -> Self {
        Self {
            p_rotate: 0.0,
            p_shift: 0.0,
            p_noise: 0.0,
            p_brightness: 0.0,
            p_edge: 0.0,
            p_blur: 0.0,
            p_mosaic: 0.0,
            p_one_sided: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_rotate", self.p_rotate),
            ("p_shift", self.p_shift),
            ("p_noise", self.p_noise),
            ("p_brightness", self.p_brightness),
            ("p_edge", self.p_edge),
            ("p_blur", self.p_blur),
            ("p_mosaic", self.p_mosaic),
            ("p_one_sided", self.p_one_sided),
            ("min_area_frac", self.min_area_frac),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(name, format!("{p} is outside [0,1]")));
            }
        }
        let [lo, hi] = self.rotate_range;
        if !(-180.0..=180.0).contains(&lo) || !(-180.0..=180.0).contains(&hi) || lo > hi {
            return Err(bad("rotate_range", format!("[{lo}, {hi}] must be an interval within [-180,180]")));
        }
        if self.shift_range[0] > self.shift_range[1] {
            return Err(bad("shift_range", "lower bound exceeds upper bound"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(bad("noise_sigma", "must be >= 0"));
        }
        for (name, [lo, hi]) in [
            ("brightness_range", self.brightness_range),
            ("edge_strength", self.edge_strength),
            ("blur_sigma_range", self.blur_sigma_range),
        ] {
            if !(lo >= 0.0) || !(lo <= hi) || !hi.is_finite() {
                return Err(bad(name, format!("[{lo}, {hi}] must be a finite interval with lower bound >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-sample random stream, ChaCha8 seeded with `stable_hash(seed, epoch, index)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(global_seed: u64, epoch: u64, index: u64) -> Self {
        let seed = stable_hash(&[global_seed, epoch, index]);
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// The derived seed.
    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Which modality a geometric op moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeoTarget {
    Both,
    RgbOnly,
    TirOnly,
}

impl GeoTarget {
    fn moves_rgb(self) -> bool {
        self != GeoTarget::TirOnly
    }

    fn moves_tir(self) -> bool {
        self != GeoTarget::RgbOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeoOp {
    Rotate { angle: f64, target: GeoTarget },
    Shift { dx: i32, dy: i32, target: GeoTarget },
}

/// Every stochastic decision of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    /// Noise standard deviations.
    pub noise_rgb: Option<f64>,
    pub noise_tir: Option<f64>,
    pub brightness: Option<f64>,
    pub edge: Option<f64>,
    pub blur: Option<f64>,
    pub rotate_triggered: bool,
    pub shift_triggered: bool,
    pub one_sided: bool,
    pub geometric: Option<GeoOp>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl AugmentPlan {
    /// Draws a plan. Consumption order: nine trigger uniforms (noise rgb,
    /// noise tir, brightness, edge, blur, rotate, shift, one-sided, side),
    /// then the values of triggered ops in the same order (noise σ rgb,
    /// noise σ tir, brightness factor, edge strength, blur σ, then the angle
    /// or `dx, dy` of the selected geometric op).
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut u = [0.0f64; 9];
        for v in u.iter_mut() {
            *v = rng.random::<f64>();
        }
        let hit = |k: usize, p: f64| u[k] < p;
        let noise_rgb = hit(0, cfg.p_noise);
        let noise_tir = hit(1, cfg.p_noise);
        let bright = hit(2, cfg.p_brightness);
        let edge = hit(3, cfg.p_edge);
        let blur = hit(4, cfg.p_blur);
        let rotate = hit(5, cfg.p_rotate);
        let shift = hit(6, cfg.p_shift);
        let one_sided = hit(7, cfg.p_one_sided);
        let target = match (one_sided, u[8] < 0.5) {
            (false, _) => GeoTarget::Both,
            (true, true) => GeoTarget::RgbOnly,
            (true, false) => GeoTarget::TirOnly,
        };
        let sigma = [0.0, cfg.noise_sigma];
        let noise_rgb = noise_rgb.then(|| uniform(rng, sigma));
        let noise_tir = noise_tir.then(|| uniform(rng, sigma));
        let brightness = bright.then(|| uniform(rng, cfg.brightness_range));
        let edge = edge.then(|| uniform(rng, cfg.edge_strength));
        let blur = blur.then(|| uniform(rng, cfg.blur_sigma_range));
        let geometric = if rotate {
            Some(GeoOp::Rotate { angle: uniform(rng, cfg.rotate_range), target })
        } else if shift {
            let [lo, hi] = cfg.shift_range;
            let dx = rng.random_range(lo..=hi);
            let dy = rng.random_range(lo..=hi);
            Some(GeoOp::Shift { dx, dy, target })
        } else {
            None
        };
        Self {
            noise_rgb,
            noise_tir,
            brightness,
            edge,
            blur,
            rotate_triggered: rotate,
            shift_triggered: shift,
            one_sided,
            geometric,
        }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Additive per-pixel Gaussian noise, clamped to `[0, 255]`.
pub fn add_noise<R: Rng + ?Sized>(img: &Image8, sigma: f64, rng: &mut R) -> Result<Image8> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = to_u8(*v as f64 + normal.sample(rng));
    }
    Ok(out)
}

/// `pixel · factor`, rounded and clamped.
pub fn adjust_brightness(img: &Image8, factor: f64) -> Image8 {
    if factor == 1.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = to_u8(*v as f64 * factor);
    }
    out
}

/// Normalized 1-D Gaussian taps, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with edge replication, unrounded.
fn blur_f64(img: &Image8, sigma: f64) -> Vec<f64> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    if sigma < 0.1 {
        return src;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kw) in k.iter().enumerate() {
                    let xx = clampi(x as i64 + t as i64 - r, w);
                    acc += kw * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kw) in k.iter().enumerate() {
                    let yy = clampi(y as i64 + t as i64 - r, h);
                    acc += kw * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    out
}

/// Separable Gaussian blur; `sigma < 0.1` is the identity.
pub fn gaussian_blur(img: &Image8, sigma: f64) -> Image8 {
    if sigma < 0.1 {
        return img.clone();
    }
    let data = blur_f64(img, sigma).into_iter().map(to_u8).collect();
    Image8::from_raw(img.width(), img.height(), img.channels(), data).unwrap()
}

/// Unsharp mask: `img + strength · (img − blur(img, σ=1))`.
pub fn edge_enhance(img: &Image8, strength: f64) -> Image8 {
    if strength == 0.0 {
        return img.clone();
    }
    let blurred = blur_f64(img, 1.0);
    let data = img.data().iter().zip(blurred).map(|(&v, b)| to_u8(v as f64 + strength * (v as f64 - b))).collect();
    Image8::from_raw(img.width(), img.height(), img.channels(), data).unwrap()
}

/// Rotates `img` by `angle` degrees about its center; exposed regions take the
/// channel means.
pub fn rotate_image(img: &Image8, angle: f64) -> Image8 {
    if angle == 0.0 {
        return img.clone();
    }
    let fill = img.fill_values();
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle.to_radians().sin_cos();
    let mut out = Image8::new(w, h, img.channels());
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate the output point back by -angle
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = cx + c * dx + s * dy;
            let v = cy - s * dx + c * dy;
            for ch in 0..img.channels() {
                let val = match img.sample_bilinear(u, v, ch) {
                    Some(p) => to_u8(p),
                    None => fill[ch],
                };
                out.set(x, y, ch, val);
            }
        }
    }
    out
}

/// Image of `b` under rotation by `angle` about `(w/2, h/2)`: the axis-aligned
/// hull of the rotated corners (unclipped).
pub fn rotate_box_hull(b: &BoundingBox<f64>, angle: f64, w: usize, h: usize) -> BoundingBox<f64> {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = angle.to_radians().sin_cos();
    let corners = [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_min, b.y_max), (b.x_max, b.y_max)];
    let pts = corners.map(|(x, y)| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    });
    let fold = |f: fn(f64, f64) -> f64, sel: fn(&(f64, f64)) -> f64, init: f64| pts.iter().map(sel).fold(init, f);
    BoundingBox {
        x_min: fold(f64::min, |p| p.0, f64::INFINITY),
        y_min: fold(f64::min, |p| p.1, f64::INFINITY),
        x_max: fold(f64::max, |p| p.0, f64::NEG_INFINITY),
        y_max: fold(f64::max, |p| p.1, f64::NEG_INFINITY),
        ..*b
    }
}

/// Rotation of one or both modalities. With `Both`, boxes become clipped hulls.
pub fn rotate_sample(s: &PairedSample, angle: f64, target: GeoTarget, min_area_frac: f64) -> PairedSample {
    if angle == 0.0 {
        return s.clone();
    }
    let mut out = s.clone();
    if target.moves_rgb() {
        out.rgb = rotate_image(&s.rgb, angle);
    }
    if target.moves_tir() {
        out.tir = rotate_image(&s.tir, angle);
    }
    if target == GeoTarget::Both {
        let (w, h) = (s.width(), s.height());
        out.boxes = s
            .boxes
            .iter()
            .filter_map(|b| clip_box(&rotate_box_hull(b, angle, w, h), w as f64, h as f64, min_area_frac))
            .collect();
    }
    out
}

/// Translates content by `(dx, dy)`; exposed regions take the channel means.
pub fn shift_image(img: &Image8, dx: i32, dy: i32) -> Image8 {
    if dx == 0 && dy == 0 {
        return img.clone();
    }
    let fill = img.fill_values();
    let (w, h, c) = (img.width() as i64, img.height() as i64, img.channels());
    let mut out = Image8::new(w as usize, h as usize, c);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx as i64, y - dy as i64);
            for ch in 0..c {
                let v = if sx >= 0 && sy >= 0 && sx < w && sy < h {
                    img.get(sx as usize, sy as usize, ch)
                } else {
                    fill[ch]
                };
                out.set(x as usize, y as usize, ch, v);
            }
        }
    }
    out
}

/// Shift of one or both modalities. With `Both`, boxes are translated and clipped.
pub fn shift_sample(s: &PairedSample, dx: i32, dy: i32, target: GeoTarget, min_area_frac: f64) -> PairedSample {
    if dx == 0 && dy == 0 {
        return s.clone();
    }
    let mut out = s.clone();
    if target.moves_rgb() {
        out.rgb = shift_image(&s.rgb, dx, dy);
    }
    if target.moves_tir() {
        out.tir = shift_image(&s.tir, dx, dy);
    }
    if target == GeoTarget::Both {
        let (w, h) = (s.width() as f64, s.height() as f64);
        out.boxes = s
            .boxes
            .iter()
            .filter_map(|b| clip_box(&b.translate(dx as f64, dy as f64), w, h, min_area_frac))
            .collect();
    }
    out
}

/// Four-sample mosaic on an `out_size²` canvas split at `(jx, jy)`.
///
/// Quadrants are numbered top-left, top-right, bottom-left, bottom-right.
/// Sample `k` is scaled (aspect preserved) just enough to cover quadrant `k`,
/// anchored so that its corner touching the joint point sits on it, and
/// cropped to the quadrant. Boxes follow the same scale and offset and are
/// clipped to the quadrant.
pub fn mosaic_at(samples: &[PairedSample], out_size: usize, jx: usize, jy: usize, min_area_frac: f64) -> Result<PairedSample> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument(format!("mosaic needs 4 samples, got {}", samples.len())));
    }
    if out_size < 64 {
        return Err(Error::InvalidArgument(format!("mosaic size {out_size} is below 64")));
    }
    if jx == 0 || jy == 0 || jx >= out_size || jy >= out_size {
        return Err(Error::InvalidArgument(format!("joint ({jx}, {jy}) is not inside the canvas")));
    }
    let mut rgb = Image8::new(out_size, out_size, 3);
    let mut tir = Image8::new(out_size, out_size, 1);
    let mut boxes = Vec::new();
    for (k, s) in samples.iter().take(4).enumerate() {
        let (right, bottom) = (k % 2 == 1, k >= 2);
        let (qx0, qx1) = if right { (jx, out_size) } else { (0, jx) };
        let (qy0, qy1) = if bottom { (jy, out_size) } else { (0, jy) };
        let (qw, qh) = (qx1 - qx0, qy1 - qy0);
        let (w, h) = (s.width(), s.height());
        let scale = (qw as f64 / w as f64).max(qh as f64 / h as f64);
        let sw = ((w as f64 * scale).ceil() as usize).max(qw);
        let sh = ((h as f64 * scale).ceil() as usize).max(qh);
        let scaled = s.resize(sw, sh);
        // canvas position of the scaled image's top-left corner
        let ox = if right { jx as i64 } else { jx as i64 - sw as i64 };
        let oy = if bottom { jy as i64 } else { jy as i64 - sh as i64 };
        for y in qy0..qy1 {
            let sy = (y as i64 - oy) as usize;
            for x in qx0..qx1 {
                let sx = (x as i64 - ox) as usize;
                for c in 0..3 {
                    rgb.set(x, y, c, scaled.rgb.get(sx, sy, c));
                }
                tir.set(x, y, 0, scaled.tir.get(sx, sy, 0));
            }
        }
        let (fx0, fy0, fx1, fy1) = (qx0 as f64, qy0 as f64, qx1 as f64, qy1 as f64);
        boxes.extend(
            scaled
                .boxes
                .iter()
                .filter_map(|b| clip_box_to_rect(&b.translate(ox as f64, oy as f64), fx0, fy0, fx1, fy1, min_area_frac)),
        );
    }
    let first = &samples[0].meta;
    let meta = SampleMeta { source: "mosaic".into(), ..first.clone() };
    Ok(PairedSample { rgb, tir, boxes, meta })
}

/// [`mosaic_at`] with the joint point drawn uniformly from the central half.
pub fn mosaic<R: Rng + ?Sized>(samples: &[PairedSample], out_size: usize, rng: &mut R, min_area_frac: f64) -> Result<PairedSample> {
    let (lo, hi) = (out_size / 4, out_size - out_size / 4);
    let jx = rng.random_range(lo..=hi);
    let jy = rng.random_range(lo..=hi);
    mosaic_at(samples, out_size, jx, jy, min_area_frac)
}

/// Applies a drawn plan. Noise draws continue from `rng`.
pub fn apply_plan<R: Rng + ?Sized>(s: &PairedSample, plan: &AugmentPlan, min_area_frac: f64, rng: &mut R) -> Result<PairedSample> {
    let mut out = s.clone();
    if let Some(sigma) = plan.noise_rgb {
        out.rgb = add_noise(&out.rgb, sigma, rng)?;
    }
    if let Some(sigma) = plan.noise_tir {
        out.tir = add_noise(&out.tir, sigma, rng)?;
    }
    if let Some(f) = plan.brightness {
        out.rgb = adjust_brightness(&out.rgb, f);
    }
    if let Some(k) = plan.edge {
        out.tir = edge_enhance(&out.tir, k);
    }
    if let Some(sigma) = plan.blur {
        out.tir = gaussian_blur(&out.tir, sigma);
    }
    Ok(match plan.geometric {
        Some(GeoOp::Rotate { angle, target }) => rotate_sample(&out, angle, target, min_area_frac),
        Some(GeoOp::Shift { dx, dy, target }) => shift_sample(&out, dx, dy, target, min_area_frac),
        None => out,
    })
}

/// Full per-sample pipeline (mosaic is the caller's job).
pub fn apply_pipeline(s: &PairedSample, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<PairedSample> {
    cfg.validate()?;
    let plan = AugmentPlan::draw(cfg, rng);
    apply_plan(s, &plan, cfg.min_area_frac, rng)
}
