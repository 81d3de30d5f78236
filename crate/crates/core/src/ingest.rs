//! Dataset import: grid cropping, grayscale TIR synthesis, paired layouts.
//!
//! Source directories follow one layout:
//!
//! ```text
//! classes.txt           one class name per line
//! rgb/<stem>.png|jpg
//! tir/<stem>.png|jpg    paired format only
//! labels/<stem>.json    [[x_min, y_min, x_max, y_max, class_id], ...]
//! ```
//!
//! Pairs match by filename stem. A missing label file means no objects.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox};
use crate::manifest::{save_manifest, DatasetManifest, ManifestRecord, Split};
use crate::raster::{validate_sample, Image8, PairedSample, SampleMeta};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Square crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

fn spaced(extent: usize, s: usize) -> Vec<usize> {
    let n = (extent / s).max(1);
    let span = (extent - s) as f64;
    if n == 1 {
        return vec![(span / 2.0).round_ties_even() as usize];
    }
    (0..n).map(|i| (i as f64 * span / (n - 1) as f64).round_ties_even() as usize).collect()
}

/// Evenly spaced `S x S` crops covering the image edges, in row-major order.
///
/// `nx = max(1, W / S)`, `x_i = round(i·(W−S)/(nx−1))`, a single crop is
/// centered (ties round to even); likewise on `y`. When `S` exceeds the
/// shorter side the result is one square crop of that side at the origin.
pub fn compute_crop_grid(w: usize, h: usize, s: usize) -> Result<Vec<CropRect>> {
    if w == 0 || h == 0 || s == 0 {
        return Err(Error::InvalidArgument(format!("crop grid needs positive sizes, got W={w} H={h} S={s}")));
    }
    if s > w.min(h) {
        return Ok(vec![CropRect { x: 0, y: 0, size: w.min(h) }]);
    }
    let xs = spaced(w, s);
    let ys = spaced(h, s);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| CropRect { x, y, size: s })).collect())
}

/// Crops both modalities; boxes are translated and clipped. `None` when no
/// box survives.
pub fn crop_sample(s: &PairedSample, r: CropRect, min_area_frac: f64) -> Result<Option<PairedSample>> {
    if r.size == 0 || r.x + r.size > s.width() || r.y + r.size > s.height() {
        return Err(Error::InvalidArgument(format!(
            "crop ({}, {}, size {}) exceeds {}x{} image",
            r.x,
            r.y,
            r.size,
            s.width(),
            s.height()
        )));
    }
    let size = r.size as f64;
    let boxes: Vec<_> = s
        .boxes
        .iter()
        .filter_map(|b| clip_box(&b.translate(-(r.x as f64), -(r.y as f64)), size, size, min_area_frac))
        .collect();
    if boxes.is_empty() {
        return Ok(None);
    }
    Ok(Some(PairedSample {
        rgb: s.rgb.crop(r.x, r.y, r.size, r.size),
        tir: s.tir.crop(r.x, r.y, r.size, r.size),
        boxes,
        meta: s.meta.clone(),
    }))
}

/// BT.601 luma: `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn synthesize_tir(rgb: &Image8) -> Image8 {
    assert_eq!(rgb.channels(), 3, "synthesize_tir expects an RGB image");
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image8::from_raw(rgb.width(), rgb.height(), 1, data).unwrap()
}

/// Layout of a source directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Paired,
    RgbOnly,
}

impl FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(SourceFormat::Paired),
            "rgb-only" => Ok(SourceFormat::RgbOnly),
            _ => Err(Error::InvalidArgument(format!("unknown format `{s}` (expected paired or rgb-only)"))),
        }
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files of `dir` by stem, sorted.
fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn read_classes(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("classes.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if names.is_empty() {
        return Err(Error::Annotation { path, message: "no class names".into() });
    }
    Ok(names)
}

/// Boxes of `labels/<stem>.json`; empty when the file is absent.
pub fn read_labels(dir: &Path, stem: &str, num_classes: usize) -> Result<Vec<BoundingBox<f64>>> {
    let path = dir.join("labels").join(format!("{stem}.json"));
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows: Vec<(f64, f64, f64, f64, u32)> =
        serde_json::from_str(&text).map_err(|e| Error::Annotation { path: path.clone(), message: e.to_string() })?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, (a, b, c, d, k)) in rows.into_iter().enumerate() {
        if k as usize >= num_classes {
            return Err(Error::Annotation {
                path,
                message: format!("box {i} references class {k}, but only {num_classes} classes are defined"),
            });
        }
        let bx = BoundingBox::new(a, b, c, d, k);
        if !bx.is_proper() {
            return Err(Error::Annotation { path, message: format!("box {i} is degenerate") });
        }
        out.push(bx);
    }
    Ok(out)
}

fn check_valid(s: &PairedSample, what: &Path) -> Result<()> {
    let v = validate_sample(s);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Annotation { path: what.into(), message: v.join("; ") })
    }
}

fn rel(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Manifest of a paired directory; paths are relative to `dir`.
pub fn import_paired(dir: &Path) -> Result<DatasetManifest> {
    let classes = read_classes(dir)?;
    let rgb = images_by_stem(&dir.join("rgb"))?;
    let tir = images_by_stem(&dir.join("tir"))?;
    let mut unmatched: Vec<String> = rgb.keys().filter(|k| !tir.contains_key(*k)).cloned().collect();
    unmatched.extend(tir.keys().filter(|k| !rgb.contains_key(*k)).cloned());
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::UnmatchedStems(unmatched));
    }
    if rgb.is_empty() {
        return Err(Error::NoPairs(dir.into()));
    }
    let mut m = DatasetManifest::new(classes);
    for (stem, rgb_path) in &rgb {
        let tir_path = &tir[stem];
        let boxes = read_labels(dir, stem, m.class_names.len())?;
        let sample = PairedSample {
            rgb: Image8::load(rgb_path, 3)?,
            tir: Image8::load(tir_path, 1)?,
            boxes: boxes.clone(),
            meta: SampleMeta::default(),
        };
        check_valid(&sample, rgb_path)?;
        m.records.push(ManifestRecord {
            rgb_path: rel(rgb_path, dir),
            tir_path: rel(tir_path, dir),
            boxes,
            split: Split::Train,
            source: "paired".into(),
        });
    }
    Ok(m)
}

/// Crops every sample of `samples` on the `crop`-grid, drops object-free
/// crops, writes the rest under `out` and returns their records.
fn write_crops(
    samples: impl Iterator<Item = Result<(String, PairedSample)>>,
    crop: usize,
    min_area_frac: f64,
    out: &Path,
    source: &str,
) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    for item in samples {
        let (stem, s) = item?;
        let grid = compute_crop_grid(s.width(), s.height(), crop)?;
        for (k, r) in grid.into_iter().enumerate() {
            let Some(c) = crop_sample(&s, r, min_area_frac)? else { continue };
            let name = format!("{stem}_{k:02}.png");
            let (rp, tp) = (out.join("rgb").join(&name), out.join("tir").join(&name));
            c.rgb.save(&rp)?;
            c.tir.save(&tp)?;
            records.push(ManifestRecord {
                rgb_path: rel(&rp, out),
                tir_path: rel(&tp, out),
                boxes: c.boxes,
                split: Split::Train,
                source: source.into(),
            });
        }
    }
    Ok(records)
}

/// Crops an RGB-only directory, synthesizes TIR for each crop, and writes
/// images under `out`. Record paths are relative to `out`.
pub fn import_rgb_only(dir: &Path, crop: usize, min_area_frac: f64, out: &Path) -> Result<DatasetManifest> {
    let classes = read_classes(dir)?;
    let rgb = images_by_stem(&dir.join("rgb"))?;
    if rgb.is_empty() {
        return Err(Error::NoPairs(dir.into()));
    }
    let nc = classes.len();
    let samples = rgb.iter().map(|(stem, path)| {
        let img = Image8::load(path, 3)?;
        let boxes = read_labels(dir, stem, nc)?;
        // grayscale of the full image; cropping commutes with the per-pixel map
        let s = PairedSample { tir: synthesize_tir(&img), rgb: img, boxes, meta: SampleMeta::default() };
        check_valid(&s, path)?;
        Ok((stem.clone(), s))
    });
    let mut m = DatasetManifest::new(classes);
    m.records = write_crops(samples, crop, min_area_frac, out, "synthetic-tir")?;
    Ok(m)
}

/// Imports `input` in `format`, crops to `crop`, and writes images plus
/// `manifest.jsonl` under `out`. Returns the manifest path.
pub fn prepare_data(input: &Path, format: SourceFormat, crop: usize, out: &Path) -> Result<PathBuf> {
    let min_area = crate::geometry::DEFAULT_MIN_AREA_FRAC;
    let m = match format {
        SourceFormat::RgbOnly => import_rgb_only(input, crop, min_area, out)?,
        SourceFormat::Paired => {
            let src = import_paired(input)?;
            let samples = (0..src.records.len()).map(|i| {
                let stem = Path::new(&src.records[i].rgb_path).file_stem().unwrap().to_string_lossy().into_owned();
                Ok((stem, src.load_sample(i, input)?))
            });
            let mut m = DatasetManifest::new(src.class_names.clone());
            m.records = write_crops(samples, crop, min_area, out, "paired")?;
            m
        }
    };
    let path = out.join(MANIFEST_NAME);
    save_manifest(&m, &path)?;
    Ok(path)
}
