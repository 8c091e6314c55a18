//! Dataset management and evaluation toolkit for cactus-disease object detection.
//!
//! The crate covers the whole offline side of a detection pipeline:
//!
//! - [`annotations`]: class taxonomy, boxes, label-file parsing and IoU.
//! - [`dataset`]: line-delimited manifests, stratified splitting, rotation
//!   augmentation and the on-disk training layout.
//! - [`metrics`]: IoU matching, precision/recall, PR curves, AP, mAP and
//!   confusion matrices.
//! - [`detector`]: the detector-backend contract, NMS, a synthetic oracle
//!   detector and prediction-file ingestion.
//! - [`bench`]: per-image latency measurement and model comparison tables.
//! - [`trainlog`]: per-epoch training-log parsing and summaries.
//! - [`report`]: text/structured/CSV report documents.
//!
//! Per-image work runs on rayon when the `parallel` feature is enabled (the
//! default); see [`par::Execution`].

pub mod annotations;
pub mod bench;
pub mod dataset;
pub mod detector;
pub mod metrics;
pub mod par;
pub mod report;
pub mod trainlog;

mod seed;

pub use annotations::{
    iou, Annotation, BoundingBox, ClassTaxonomy, Detection, DiseaseClass, ImageDims, ImageRecord,
    LabelFormat,
};
pub use dataset::{DatasetManifest, Split, SplitSpec};
pub use metrics::{EvalConfig, EvalReport, Interpolation};

/// Version string stamped into every generated artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
