//! Detector backends, non-maximum suppression, a synthetic oracle detector
//! and prediction files.
//!
//! Prediction file format, one detection per line:
//!
//! ```text
//! image_id class confidence x_min y_min x_max y_max
//! ```
//!
//! Coordinates are corner pixels. Blank lines and lines starting with `#`
//! are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::annotations::{iou, BoundingBox, Detection, ImageRecord};
use crate::dataset::{DatasetManifest, Split};
use crate::par::{self, Execution};
use crate::seed;

/// Conventional NMS IoU threshold.
pub const DEFAULT_NMS_IOU: f64 = 0.45;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("predictions reference image(s) not in the manifest: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
    #[error("backend {backend} failed on image {image_id}: {message}")]
    Backend {
        backend: String,
        image_id: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Failure reported by a backend for a single call.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct BackendError(pub String);

/// A source of detections for one image at a time.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;

    fn detect(&self, record: &ImageRecord) -> Result<Vec<Detection>, BackendError>;

    /// Whether `detect` may run on several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Greedy NMS. Keeps the most confident detection, drops everything
/// overlapping it at or above the threshold (same class only when
/// `class_aware`), and repeats. Output is sorted by descending confidence.
pub fn nms(
    detections: &[Detection],
    iou_threshold: f64,
    class_aware: bool,
) -> Result<Vec<Detection>, DetectorError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(DetectorError::InvalidThreshold(iou_threshold));
    }
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept.iter().any(|k| {
            (!class_aware || k.class_id == d.class_id) && iou(&k.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Noise model of the oracle detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct OracleConfig {
    pub jitter_px: f64,
    pub drop_rate: f64,
    pub ghost_rate: f64,
    pub misclass_rate: f64,
    pub confidence_floor: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    /// Perfect detections at confidence 1.
    fn default() -> Self {
        Self {
            jitter_px: 0.0,
            drop_rate: 0.0,
            ghost_rate: 0.0,
            misclass_rate: 0.0,
            confidence_floor: 1.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.jitter_px.is_finite() && self.jitter_px >= 0.0) {
            return Err(DetectorError::InvalidConfig(format!(
                "jitter_px must be finite and non-negative, got {}",
                self.jitter_px
            )));
        }
        for (name, v) in [
            ("drop_rate", self.drop_rate),
            ("ghost_rate", self.ghost_rate),
            ("misclass_rate", self.misclass_rate),
            ("confidence_floor", self.confidence_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectorError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

// Keeps at least `min_len` of extent inside [0, limit].
fn enforce_extent(lo: f64, hi: f64, min_len: f64, limit: f64) -> (f64, f64) {
    let lo = lo.clamp(0.0, limit);
    let hi = hi.clamp(0.0, limit);
    if hi - lo >= min_len {
        return (lo, hi);
    }
    let centre = (lo + hi) / 2.0;
    let start = (centre - min_len / 2.0).clamp(0.0, limit - min_len);
    (start, start + min_len)
}

/// Synthetic detections derived from a record's ground truth. The output
/// depends only on `config` and `record` (via its image id).
pub fn oracle_detect(
    record: &ImageRecord,
    config: &OracleConfig,
    num_classes: u32,
) -> Vec<Detection> {
    let mut rng = seed::stream_rng(config.seed, &format!("oracle/{}", record.image_id));
    let w = f64::from(record.width);
    let h = f64::from(record.height);
    let j = config.jitter_px;
    let mut out = Vec::with_capacity(record.annotations.len());
    let mut ghosts = 0usize;

    for ann in &record.annotations {
        // fixed number of draws per annotation keeps streams aligned
        let drop_u: f64 = rng.gen();
        let offsets: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0) * j);
        let flip_u: f64 = rng.gen();
        let other: u32 = rng.gen_range(0..num_classes.max(2) - 1);
        let conf_u: f64 = rng.gen();
        let ghost_u: f64 = rng.gen();

        if ghost_u < config.ghost_rate {
            ghosts += 1;
        }
        if drop_u < config.drop_rate {
            continue;
        }
        let b = ann.bbox;
        let (x1, x2) = enforce_extent(
            b.x_min() + offsets[0],
            b.x_max() + offsets[2],
            b.width().min(1.0),
            w,
        );
        let (y1, y2) = enforce_extent(
            b.y_min() + offsets[1],
            b.y_max() + offsets[3],
            b.height().min(1.0),
            h,
        );
        let Ok(bbox) = BoundingBox::new(x1, y1, x2, y2) else {
            continue;
        };
        let class_id = if num_classes > 1 && flip_u < config.misclass_rate {
            // uniform over the other classes
            if other >= ann.class_id {
                other + 1
            } else {
                other
            }
        } else {
            ann.class_id
        };
        let floor = config.confidence_floor;
        let confidence = (floor + (1.0 - floor) * conf_u).min(1.0);
        if let Ok(d) = Detection::new(class_id, bbox, confidence) {
            out.push(d);
        }
    }

    let ceiling = median_confidence(&out).unwrap_or(1.0);
    for _ in 0..ghosts {
        let bw: f64 = rng.gen_range(0.05..=0.5) * w;
        let bh: f64 = rng.gen_range(0.05..=0.5) * h;
        let x: f64 = rng.gen::<f64>() * (w - bw);
        let y: f64 = rng.gen::<f64>() * (h - bh);
        let class_id = rng.gen_range(0..num_classes.max(1));
        let confidence = rng.gen::<f64>() * ceiling;
        if let Ok(bbox) = BoundingBox::new(x, y, x + bw, y + bh) {
            if let Ok(d) = Detection::new(class_id, bbox, confidence) {
                out.push(d);
            }
        }
    }
    out
}

fn median_confidence(dets: &[Detection]) -> Option<f64> {
    if dets.is_empty() {
        return None;
    }
    let mut c: Vec<f64> = dets.iter().map(Detection::confidence).collect();
    c.sort_by(f64::total_cmp);
    let n = c.len();
    Some(if n % 2 == 1 {
        c[n / 2]
    } else {
        (c[n / 2 - 1] + c[n / 2]) / 2.0
    })
}

/// Detections per image plus where they came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PredictionSet {
    pub detections: BTreeMap<String, Vec<Detection>>,
    pub provenance: String,
}

impl PredictionSet {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            detections: BTreeMap::new(),
            provenance: provenance.into(),
        }
    }

    pub fn images(&self) -> usize {
        self.detections.len()
    }

    pub fn detection_count(&self) -> usize {
        self.detections.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn get(&self, image_id: &str) -> &[Detection] {
        self.detections
            .get(image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Ground truth of every record as confidence-1 detections.
    pub fn from_ground_truth(manifest: &DatasetManifest) -> Self {
        let mut set = PredictionSet::new("ground-truth");
        for r in manifest.records() {
            let dets = r
                .annotations
                .iter()
                .map(|a| {
                    Detection::new(a.class_id, a.bbox, 1.0).expect("1.0 is a valid confidence")
                })
                .collect();
            set.detections.insert(r.image_id.clone(), dets);
        }
        set
    }

    /// Image ids not present in the manifest.
    pub fn unknown_images(&self, manifest: &DatasetManifest) -> Vec<String> {
        self.detections
            .keys()
            .filter(|id| manifest.get(id).is_none())
            .cloned()
            .collect()
    }

    /// Prediction-file text, images in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, dets) in &self.detections {
            out.push_str(&format_prediction_lines(id, dets));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DetectorError> {
        fs::write(path, self.to_text()).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn format_prediction_lines(image_id: &str, dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = d.bbox;
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            image_id,
            d.class_id,
            d.confidence(),
            b.x_min(),
            b.y_min(),
            b.x_max(),
            b.y_max()
        ));
    }
    out
}

/// Parses prediction-file text. Images keep the order of their lines.
pub fn parse_predictions(text: &str, provenance: &str) -> Result<PredictionSet, DetectorError> {
    let mut set = PredictionSet::new(provenance);
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| DetectorError::Parse { line, message };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad class id {:?}", fields[1])))?;
        let mut nums = [0.0f64; 5];
        for (slot, text) in nums.iter_mut().zip(&fields[2..]) {
            *slot = text
                .parse()
                .map_err(|_| err(format!("bad number {text:?}")))?;
        }
        let bbox =
            BoundingBox::new(nums[1], nums[2], nums[3], nums[4]).map_err(|e| err(e.to_string()))?;
        let det = Detection::new(class_id, bbox, nums[0]).map_err(|e| err(e.to_string()))?;
        set.detections
            .entry(fields[0].to_string())
            .or_default()
            .push(det);
    }
    Ok(set)
}

/// Reads a prediction file and checks its image ids against the manifest.
pub fn load_predictions(
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<PredictionSet, DetectorError> {
    let text = fs::read_to_string(path).map_err(|source| DetectorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let set = parse_predictions(&text, &path.display().to_string())?;
    let unknown = set.unknown_images(manifest);
    if !unknown.is_empty() {
        return Err(DetectorError::UnknownImages(unknown));
    }
    Ok(set)
}

pub struct OracleBackend {
    pub config: OracleConfig,
    pub num_classes: u32,
}

impl OracleBackend {
    pub fn new(config: OracleConfig, num_classes: u32) -> Result<Self, DetectorError> {
        config.validate()?;
        Ok(Self {
            config,
            num_classes,
        })
    }
}

impl DetectorBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn detect(&self, record: &ImageRecord) -> Result<Vec<Detection>, BackendError> {
        Ok(oracle_detect(record, &self.config, self.num_classes))
    }
}

/// Serves detections from an existing prediction set.
pub struct FileReplayBackend {
    set: PredictionSet,
}

impl FileReplayBackend {
    pub fn new(set: PredictionSet) -> Self {
        Self { set }
    }

    pub fn load(path: &Path, manifest: &DatasetManifest) -> Result<Self, DetectorError> {
        Ok(Self::new(load_predictions(path, manifest)?))
    }
}

impl DetectorBackend for FileReplayBackend {
    fn name(&self) -> &str {
        "file-replay"
    }

    fn detect(&self, record: &ImageRecord) -> Result<Vec<Detection>, BackendError> {
        Ok(self.set.get(&record.image_id).to_vec())
    }
}

/// Runs an external command per batch. The command receives the path of a
/// manifest-slice file (JSON lines) as its last argument and must print
/// prediction lines on stdout. A nonzero exit is a failure.
pub struct ExternalProcessBackend {
    name: String,
    program: PathBuf,
    args: Vec<String>,
}

impl ExternalProcessBackend {
    pub fn new(name: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            name: name.into(),
            program: program.into(),
            args,
        }
    }

    pub fn detect_batch(&self, records: &[&ImageRecord]) -> Result<PredictionSet, BackendError> {
        let mut slice = tempfile::NamedTempFile::new().map_err(|e| BackendError(e.to_string()))?;
        for r in records {
            let line = serde_json::to_string(r).map_err(|e| BackendError(e.to_string()))?;
            writeln!(slice, "{line}").map_err(|e| BackendError(e.to_string()))?;
        }
        slice.flush().map_err(|e| BackendError(e.to_string()))?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(slice.path())
            .output()
            .map_err(|e| BackendError(format!("cannot run {}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(BackendError(format!(
                "{} exited with {}: {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let text = String::from_utf8(output.stdout).map_err(|e| BackendError(e.to_string()))?;
        let set = parse_predictions(&text, &self.name).map_err(|e| BackendError(e.to_string()))?;
        let stray: Vec<&String> = set
            .detections
            .keys()
            .filter(|id| !records.iter().any(|r| &r.image_id == *id))
            .collect();
        if let Some(id) = stray.first() {
            return Err(BackendError(format!(
                "output names image {id} outside the batch"
            )));
        }
        Ok(set)
    }
}

impl DetectorBackend for ExternalProcessBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, record: &ImageRecord) -> Result<Vec<Detection>, BackendError> {
        let mut set = self.detect_batch(&[record])?;
        Ok(set.detections.remove(&record.image_id).unwrap_or_default())
    }

    fn concurrent(&self) -> bool {
        false
    }
}

/// Sleeps for a fixed delay and returns nothing.
pub struct DelayBackend {
    pub delay: Duration,
}

impl DetectorBackend for DelayBackend {
    fn name(&self) -> &str {
        "delay"
    }

    fn detect(&self, _record: &ImageRecord) -> Result<Vec<Detection>, BackendError> {
        std::thread::sleep(self.delay);
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageTiming {
    pub image_id: String,
    pub millis: f64,
}

/// Calls `backend.detect` once per record (optionally one split), in image
/// id order, timing each call.
pub fn run_detector(
    backend: &dyn DetectorBackend,
    manifest: &DatasetManifest,
    split: Option<Split>,
    exec: Execution,
) -> Result<(PredictionSet, Vec<ImageTiming>), DetectorError> {
    let records = manifest.sorted_records(split);
    let exec = if backend.concurrent() {
        exec
    } else {
        Execution::Sequential
    };
    let results = par::try_map(exec, &records, |r| {
        let start = Instant::now();
        let dets = backend.detect(r).map_err(|e| DetectorError::Backend {
            backend: backend.name().to_string(),
            image_id: r.image_id.clone(),
            message: e.0,
        })?;
        let millis = start.elapsed().as_secs_f64() * 1e3;
        Ok::<_, DetectorError>((r.image_id.clone(), dets, millis))
    })?;
    let mut set = PredictionSet::new(backend.name());
    let mut timings = Vec::with_capacity(results.len());
    for (image_id, dets, millis) in results {
        timings.push(ImageTiming {
            image_id: image_id.clone(),
            millis,
        });
        set.detections.insert(image_id, dets);
    }
    Ok((set, timings))
}
