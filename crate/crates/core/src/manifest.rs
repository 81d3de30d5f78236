//! Line-delimited dataset manifests.
//!
//! Line 1 is a header `{"num_classes": N, "class_names": [...]}`; every following
//! line is one record
//! `{"rgb_path", "tir_path", "boxes": [[x_min, y_min, x_max, y_max, class_id], ...], "split", "source"}`.
//! Relative image paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::{Image8, PairedSample, SampleMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub rgb_path: String,
    pub tir_path: String,
    #[serde(with = "box_rows")]
    pub boxes: Vec<BoundingBox<f64>>,
    pub split: Split,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_classes: u32,
    class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub num_classes: u32,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

/// `[x_min, y_min, x_max, y_max, class_id]` rows.
pub(crate) mod box_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::BoundingBox;

    pub fn serialize<S: Serializer>(boxes: &[BoundingBox<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<(f64, f64, f64, f64, u32)> =
            boxes.iter().map(|b| (b.x_min, b.y_min, b.x_max, b.y_max, b.class_id)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BoundingBox<f64>>, D::Error> {
        let rows = Vec::<(f64, f64, f64, f64, u32)>::deserialize(d)?;
        Ok(rows.into_iter().map(|(a, b, c, e, k)| BoundingBox::new(a, b, c, e, k)).collect())
    }
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>) -> Self {
        Self { num_classes: class_names.len() as u32, class_names, records: Vec::new() }
    }

    /// Checks one record against the manifest-level invariants.
    pub fn check_record(&self, r: &ManifestRecord) -> std::result::Result<(), String> {
        for (i, b) in r.boxes.iter().enumerate() {
            if !b.is_proper() {
                return Err(format!(
                    "box {i} ({}, {}, {}, {}) requires x_min < x_max and y_min < y_max",
                    b.x_min, b.y_min, b.x_max, b.y_max
                ));
            }
            if b.class_id >= self.num_classes {
                return Err(format!(
                    "box {i} class_id {} out of range (num_classes = {})",
                    b.class_id, self.num_classes
                ));
            }
        }
        Ok(())
    }

    /// Loads image pixels for record `index`, resolving paths against `base`.
    pub fn load_sample(&self, index: usize, base: &Path) -> Result<PairedSample> {
        let r = &self.records[index];
        let rgb_path = resolve(base, &r.rgb_path);
        let tir_path = resolve(base, &r.tir_path);
        Ok(PairedSample {
            rgb: Image8::load(&rgb_path, 3)?,
            tir: Image8::load(&tir_path, 1)?,
            boxes: r.boxes.clone(),
            meta: SampleMeta {
                source: r.source.clone(),
                rgb_id: r.rgb_path.clone(),
                tir_id: r.tir_path.clone(),
                split: r.split.to_string(),
            },
        })
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Directory that relative record paths resolve against.
pub fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Manifest { path: path.into(), line, message };
    let mut lines = BufReader::new(file).lines().enumerate();

    let header = loop {
        match lines.next() {
            None => return Err(bad(1, "missing header line".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let h: Header = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
                if h.class_names.len() != h.num_classes as usize {
                    return Err(bad(
                        i + 1,
                        format!(
                            "num_classes {} disagrees with {} class_names",
                            h.num_classes,
                            h.class_names.len()
                        ),
                    ));
                }
                break h;
            }
        }
    };

    let mut m = DatasetManifest {
        num_classes: header.num_classes,
        class_names: header.class_names,
        records: Vec::new(),
    };
    let mut rgb_seen = HashSet::new();
    let mut tir_seen = HashSet::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let r: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| bad(lineno, e.to_string()))?;
        m.check_record(&r).map_err(|msg| bad(lineno, msg))?;
        if !rgb_seen.insert(r.rgb_path.clone()) {
            return Err(bad(lineno, format!("duplicate rgb_path `{}`", r.rgb_path)));
        }
        if !tir_seen.insert(r.tir_path.clone()) {
            return Err(bad(lineno, format!("duplicate tir_path `{}`", r.tir_path)));
        }
        m.records.push(r);
    }
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header { num_classes: m.num_classes, class_names: m.class_names.clone() };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in &m.records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
