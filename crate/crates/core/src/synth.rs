//! Synthetic paired data: coloured rectangles ("vehicles") on a textured
//! background, with the thermal image derived as grayscale plus noise.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::ingest::synthesize_tir;
use crate::raster::{Image8, PairedSample, SampleMeta};
use crate::rng::rng_from;

pub const TOY_CLASSES: [&str; 3] = ["car", "truck", "bus"];

/// Per class: RGB colour and the width/height ranges in pixels.
const SHAPES: [([u8; 3], [usize; 2], [usize; 2]); 3] = [
    ([220, 40, 40], [14, 24], [14, 24]),
    ([40, 80, 230], [26, 38], [20, 30]),
    ([40, 200, 60], [40, 56], [18, 26]),
];

/// One synthetic pair of `size`×`size` with 2–4 non-touching objects.
pub fn toy_sample(size: usize, seed: u64, index: u64) -> PairedSample {
    let mut rng = rng_from(&[seed, index, 0x70f]);
    let mut rgb = Image8::new(size, size, 3);
    let base = [rng.random_range(60..110u8), rng.random_range(60..110u8), rng.random_range(60..110u8)];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let tex = ((x / 4 + y / 4 + c) % 3) as u8 * 6;
                rgb.set(x, y, c, base[c] + tex + rng.random_range(0..8u8));
            }
        }
    }
    let n = rng.random_range(2..=4);
    let mut boxes: Vec<BoundingBox<f64>> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < n && attempts < 200 {
        attempts += 1;
        let class = rng.random_range(0..3usize);
        let (colour, wr, hr) = SHAPES[class];
        let (w, h) = (rng.random_range(wr[0]..=wr[1]), rng.random_range(hr[0]..=hr[1]));
        if w + 4 > size || h + 4 > size {
            continue;
        }
        let (x0, y0) = (rng.random_range(2..size - w - 1), rng.random_range(2..size - h - 1));
        let b = BoundingBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64, class as u32);
        // keep a 4 px gap so objects never touch
        let grown = BoundingBox::new(b.x_min - 4.0, b.y_min - 4.0, b.x_max + 4.0, b.y_max + 4.0, 0);
        if boxes.iter().any(|o| iou(&grown, &BoundingBox { class_id: 0, ..*o }) > 0.0) {
            continue;
        }
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    let shade = if y < y0 + 3 || x < x0 + 3 { 25 } else { 0 };
                    rgb.set(x, y, c, colour[c].saturating_add(shade));
                }
            }
        }
        boxes.push(b);
    }
    let mut tir = synthesize_tir(&rgb);
    let noise = Normal::new(0.0, 6.0).expect("valid sigma");
    for v in tir.data_mut() {
        *v = (*v as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
    }
    PairedSample { rgb, tir, boxes, meta: SampleMeta { source: "synthetic".into(), ..Default::default() } }
}

/// The eight-image toy set used for overfitting checks and the bundled fixture.
pub fn toy_dataset(size: usize, seed: u64) -> Vec<PairedSample> {
    (0..8).map(|k| toy_sample(size, seed, k)).collect()
}

/// Writes samples in the paired source layout read by `prepare_data`:
/// `classes.txt`, `rgb/`, `tir/`, `labels/` with stems `img_000`, ….
pub fn write_paired_layout(dir: &Path, samples: &[PairedSample], class_names: &[&str]) -> Result<()> {
    for sub in ["rgb", "tir", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let classes = dir.join("classes.txt");
    fs::write(&classes, class_names.join("\n") + "\n").map_err(|e| Error::io(&classes, e))?;
    for (k, s) in samples.iter().enumerate() {
        let stem = format!("img_{k:03}");
        s.rgb.save(&dir.join("rgb").join(format!("{stem}.png")))?;
        s.tir.save(&dir.join("tir").join(format!("{stem}.png")))?;
        let rows: Vec<(f64, f64, f64, f64, u32)> = s.boxes.iter().map(|b| (b.x_min, b.y_min, b.x_max, b.y_max, b.class_id)).collect();
        let p = dir.join("labels").join(format!("{stem}.json"));
        fs::write(&p, serde_json::to_string(&rows).expect("rows serialize")).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
