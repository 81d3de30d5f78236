//! Model configuration, parameter storage, and the shared forward context.

mod checkpoint;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, record_size, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{Forward, Mode};
pub use params::{ModelParams, ParamEntry, ParamKind, ParamSpec};

/// Strides of the three pyramid levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Level names, used in parameter names.
pub const LEVELS: [&str; 3] = ["p3", "p4", "p5"];

/// Loss weights of the auxiliary branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxWeights {
    /// Weight of each pre-fusion (per-modality) auxiliary head.
    pub pre: f64,
    /// Weight of the post-fusion auxiliary head.
    pub post: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self { pre: 0.25, post: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: u32,
    pub stem_channels: usize,
    /// Channel counts of P3, P4, P5.
    pub channels: [usize; 3],
    pub blocks_per_stage: usize,
    pub fusion_heads: usize,
    /// Token width inside the fusion block; `None` uses each level's channel count.
    pub fusion_dim: Option<usize>,
    pub aux_weights: AuxWeights,
    pub conf_thresh: f64,
    pub nms_iou: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            stem_channels: 16,
            channels: [32, 64, 128],
            blocks_per_stage: 2,
            fusion_heads: 4,
            fusion_dim: None,
            aux_weights: AuxWeights::default(),
            conf_thresh: 0.01,
            nms_iou: 0.5,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl ModelConfig {
    pub fn fusion_width(&self, level: usize) -> usize {
        self.fusion_dim.unwrap_or(self.channels[level])
    }

    /// Prediction channels per cell: 4 box offsets, objectness, class logits.
    pub fn pred_channels(&self) -> usize {
        5 + self.num_classes as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(invalid("model.num_classes", "must be positive"));
        }
        if self.stem_channels == 0 {
            return Err(invalid("model.stem_channels", "must be positive"));
        }
        if self.channels.contains(&0) {
            return Err(invalid("model.channels", "every level needs a positive channel count"));
        }
        if self.fusion_heads == 0 {
            return Err(invalid("model.fusion_heads", "must be positive"));
        }
        for level in 0..3 {
            let d = self.fusion_width(level);
            if d == 0 || d % self.fusion_heads != 0 {
                return Err(invalid(
                    "model.fusion_heads",
                    format!("fusion width {d} at {} not divisible by {} heads", LEVELS[level], self.fusion_heads),
                ));
            }
        }
        for (name, w) in [("model.aux_weights.pre", self.aux_weights.pre), ("model.aux_weights.post", self.aux_weights.post)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid(name, format!("must be a finite value >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return Err(invalid("model.conf_thresh", format!("must lie in [0,1], got {}", self.conf_thresh)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(invalid("model.nms_iou", format!("must lie in [0,1], got {}", self.nms_iou)));
        }
        Ok(())
    }
}

/// Parameter groups. Every parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchTag {
    BackboneRgb,
    BackboneTir,
    Fusion,
    Neck,
    HeadMain,
    HeadAuxPre,
    HeadAuxPost,
}

impl BranchTag {
    pub const ALL: [BranchTag; 7] = [
        BranchTag::BackboneRgb,
        BranchTag::BackboneTir,
        BranchTag::Fusion,
        BranchTag::Neck,
        BranchTag::HeadMain,
        BranchTag::HeadAuxPre,
        BranchTag::HeadAuxPost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchTag::BackboneRgb => "backbone_rgb",
            BranchTag::BackboneTir => "backbone_tir",
            BranchTag::Fusion => "fusion",
            BranchTag::Neck => "neck",
            BranchTag::HeadMain => "head_main",
            BranchTag::HeadAuxPre => "head_aux_pre",
            BranchTag::HeadAuxPost => "head_aux_post",
        }
    }

    pub fn is_aux(self) -> bool {
        matches!(self, BranchTag::HeadAuxPre | BranchTag::HeadAuxPost)
    }
}

impl fmt::Display for BranchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BranchTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown branch tag `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub fn tag(self) -> BranchTag {
        match self {
            Modality::Rgb => BranchTag::BackboneRgb,
            Modality::Tir => BranchTag::BackboneTir,
        }
    }
}

/// The four detection heads. Only `Main` survives [`ModelParams::strip_aux`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Main,
    AuxPreRgb,
    AuxPreTir,
    AuxPost,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Main, HeadKind::AuxPreRgb, HeadKind::AuxPreTir, HeadKind::AuxPost];

    pub fn tag(self) -> BranchTag {
        match self {
            HeadKind::Main => BranchTag::HeadMain,
            HeadKind::AuxPreRgb | HeadKind::AuxPreTir => BranchTag::HeadAuxPre,
            HeadKind::AuxPost => BranchTag::HeadAuxPost,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Main => "main",
            HeadKind::AuxPreRgb => "aux_pre_rgb",
            HeadKind::AuxPreTir => "aux_pre_tir",
            HeadKind::AuxPost => "aux_post",
        }
    }

    /// Parameter name prefix, e.g. `head_aux_pre.aux_pre_rgb`.
    pub fn prefix(self) -> String {
        format!("{}.{}", self.tag(), self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown head tag `{s}`")))
    }
}

/// Three-level container (P3, P4, P5).
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid<X> {
    pub levels: [X; 3],
}

impl<X> Pyramid<X> {
    pub fn new(p3: X, p4: X, p5: X) -> Self {
        Self { levels: [p3, p4, p5] }
    }

    pub fn p3(&self) -> &X {
        &self.levels[0]
    }

    pub fn p4(&self) -> &X {
        &self.levels[1]
    }

    pub fn p5(&self) -> &X {
        &self.levels[2]
    }

    pub fn map<Y>(&self, f: impl FnMut(&X) -> Y) -> Pyramid<Y> {
        let mut f = f;
        Pyramid { levels: [f(&self.levels[0]), f(&self.levels[1]), f(&self.levels[2])] }
    }

    pub fn try_map<Y>(&self, mut f: impl FnMut(usize, &X) -> Result<Y>) -> Result<Pyramid<Y>> {
        Ok(Pyramid { levels: [f(0, &self.levels[0])?, f(1, &self.levels[1])?, f(2, &self.levels[2])?] })
    }
}
