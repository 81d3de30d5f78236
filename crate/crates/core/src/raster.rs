//! 8-bit rasters and the paired RGB/TIR sample that flows through ingestion
//! and augmentation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Minimum side length of a valid sample.
pub const MIN_SIDE: usize = 32;

/// Interleaved 8-bit raster, row-major `H x W x C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_raw(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "raster {width}x{height}x{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mean of each channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0u64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        sums.into_iter().map(|s| s as f64 / n).collect()
    }

    /// Channel means rounded to the nearest gray level; the fill used for exposed regions.
    pub fn fill_values(&self) -> Vec<u8> {
        self.channel_means().into_iter().map(|m| m.round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Bilinear sample at continuous pixel-index coordinates (pixel centers at
    /// integers), or `None` when outside `[0, W-1] x [0, H-1]`.
    pub fn sample_bilinear(&self, u: f64, v: f64, c: usize) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0) {
            return None;
        }
        Some(self.bilinear_clamped(u, v, c))
    }

    fn bilinear_clamped(&self, u: f64, v: f64, c: usize) -> f64 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let p = |x, y| self.get(x, y, c) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with edge clamping. Same-size resize is an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> Image8 {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image8::new(width, height, self.channels);
        for y in 0..height {
            let v = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let u = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    let val = self.bilinear_clamped(u, v, c);
                    out.set(x, y, c, val.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Copies the `w x h` window at `(x, y)`. Caller guarantees bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Image8 {
        let mut out = Image8::new(w, h, self.channels);
        let row = w * self.channels;
        for r in 0..h {
            let src = ((y + r) * self.width + x) * self.channels;
            out.data[r * row..(r + 1) * row].copy_from_slice(&self.data[src..src + row]);
        }
        out
    }

    /// Single-channel image replicated to three channels.
    pub fn gray_to_rgb(&self) -> Image8 {
        assert_eq!(self.channels, 1);
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image8 { width: self.width, height: self.height, channels: 3, data }
    }

    pub fn load(path: &Path, channels: usize) -> Result<Image8> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match channels {
            1 => img.into_luma8().into_raw(),
            3 => img.into_rgb8().into_raw(),
            n => return Err(Error::InvalidArgument(format!("unsupported channel count {n}"))),
        };
        Image8::from_raw(w, h, channels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(Error::InvalidArgument(format!("unsupported channel count {n}"))),
        };
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image { path: path.into(), source })
    }
}

/// Provenance of a sample.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleMeta {
    pub source: String,
    pub rgb_id: String,
    pub tir_id: String,
    pub split: String,
}

/// Co-registered RGB (3-channel) and TIR (1-channel) images sharing one box list.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub rgb: Image8,
    pub tir: Image8,
    pub boxes: Vec<BoundingBox<f64>>,
    pub meta: SampleMeta,
}

impl PairedSample {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    /// Resizes both modalities and rescales the boxes.
    pub fn resize(&self, width: usize, height: usize) -> PairedSample {
        let sx = width as f64 / self.width() as f64;
        let sy = height as f64 / self.height() as f64;
        PairedSample {
            rgb: self.rgb.resize(width, height),
            tir: self.tir.resize(width, height),
            boxes: self.boxes.iter().map(|b| b.scale(sx, sy)).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Lists every violated sample invariant; empty when the sample is valid.
pub fn validate_sample(s: &PairedSample) -> Vec<String> {
    let mut out = Vec::new();
    if s.rgb.channels() != 3 {
        out.push(format!("rgb: expected 3 channels, got {}", s.rgb.channels()));
    }
    if s.tir.channels() != 1 {
        out.push(format!("tir: expected 1 channel, got {}", s.tir.channels()));
    }
    if s.rgb.width() != s.tir.width() || s.rgb.height() != s.tir.height() {
        out.push(format!(
            "dimensions: rgb {}x{} does not match tir {}x{}",
            s.rgb.width(),
            s.rgb.height(),
            s.tir.width(),
            s.tir.height()
        ));
    }
    let (w, h) = (s.rgb.width(), s.rgb.height());
    if w < MIN_SIDE || h < MIN_SIDE {
        out.push(format!("dimensions: {w}x{h} below minimum side {MIN_SIDE}"));
    }
    let (wf, hf) = (w as f64, h as f64);
    for (i, b) in s.boxes.iter().enumerate() {
        if !b.is_proper() {
            out.push(format!("boxes[{i}]: degenerate or non-finite box {b:?}"));
        } else if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > wf || b.y_max > hf {
            out.push(format!(
                "boxes[{i}]: ({}, {}, {}, {}) outside frame {w}x{h}",
                b.x_min, b.y_min, b.x_max, b.y_max
            ));
        }
        if let Some(sc) = b.score {
            if !(0.0..=1.0).contains(&sc) {
                out.push(format!("boxes[{i}]: score {sc} outside [0,1]"));
            }
        }
    }
    out
}
