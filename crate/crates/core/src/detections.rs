//! Line-delimited detection records, the interchange format between
//! inference, evaluation and ensembling.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: u32,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, b: &BoundingBox<f64>) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            class_id: b.class_id,
            score: b.score.unwrap_or(0.0),
        }
    }

    pub fn to_box(&self) -> BoundingBox<f64> {
        BoundingBox::new(self.x_min, self.y_min, self.x_max, self.y_max, self.class_id).with_score(self.score)
    }
}

/// Detections grouped per image id; file order is kept within an image.
pub type DetectionSet = BTreeMap<String, Vec<BoundingBox<f64>>>;

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = DetectionSet::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Detections { path: path.to_path_buf(), line: k + 1, message };
        let r: DetectionRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let b = r.to_box();
        if !b.is_proper() || !(0.0..=1.0).contains(&r.score) {
            return Err(malformed("degenerate box or score outside [0, 1]".into()));
        }
        out.entry(r.image_id).or_default().push(b);
    }
    Ok(out)
}

/// Writes images in id order. Images without boxes leave no trace.
pub fn write_detections(path: &Path, set: &DetectionSet) -> Result<()> {
    let mut buf = Vec::new();
    for (id, boxes) in set {
        for b in boxes {
            serde_json::to_writer(&mut buf, &DetectionRecord::new(id, b)).expect("records serialize");
            buf.push(b'\n');
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
