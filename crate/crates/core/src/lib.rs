//! Desk-scale RGB + thermal-infrared object detection.
//!
//! Two weight-independent backbones extract three-scale pyramids from the RGB
//! and TIR images, a bidirectional cross-modal attention block fuses them at
//! each scale, and an anchor-free head predicts boxes. During training three
//! auxiliary heads supervise the per-modality and fused pyramids; they are
//! stripped for inference. Around the model sit paired-modality augmentation,
//! dataset ingestion, mAP evaluation, and weighted box fusion for ensembles.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pin the common
//! instantiations.

pub mod augment;
pub mod autodiff;
pub mod detections;
pub mod detector;
pub mod backbone;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod heads;
pub mod infer;
pub mod ingest;
pub mod manifest;
pub mod model;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{clip_box, iou, BoundingBox, CenterBox};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestRecord, Split};
pub use raster::{validate_sample, Image8, PairedSample, SampleMeta};
pub use model::{BranchTag, ModelConfig, ModelParams};
pub use scalar::Scalar;

pub type Box32 = BoundingBox<f32>;
pub type Box64 = BoundingBox<f64>;
pub type Params32 = ModelParams<f32>;
pub type Params64 = ModelParams<f64>;
