//! Classes, boxes, annotations and label files.
//!
//! Boxes are stored in corner form `(x_min, y_min, x_max, y_max)` in pixel
//! coordinates, with continuous values since rotation and normalization
//! produce non-integral coordinates. Label files come in two explicitly
//! tagged flavours, never auto-detected:
//!
//! - `corner_pixel`: `class x_min y_min x_max y_max`
//! - `normalized_center`: `class cx cy w h`, geometry in `[0, 1]`

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box coordinate is not finite: {0:?}")]
    NonFinite([f64; 4]),
    #[error("box coordinate is negative: {0:?}")]
    Negative([f64; 4]),
    #[error("box has zero or negative extent: {0:?}")]
    Degenerate([f64; 4]),
    #[error("image dimensions must be positive, got {0}x{1}")]
    ZeroDims(u32, u32),
    #[error("box {bbox:?} exceeds image bounds {width}x{height}")]
    OutOfBounds {
        bbox: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("normalized value out of [0, 1]: {0:?}")]
    NormalizedRange([f64; 4]),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("taxonomy must contain at least one class")]
    Empty,
    #[error("class ids must be contiguous from 0: expected {expected}, found {found}")]
    NonContiguous { expected: u32, found: u32 },
    #[error("class name {0:?} is empty or contains whitespace")]
    BadName(String),
    #[error("duplicate class name {0:?}")]
    DuplicateName(String),
    #[error("taxonomy file: {0}")]
    Parse(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Validation { line: usize, source: BoxError },
    #[error("normalized_center labels require image dimensions")]
    MissingDims,
    #[error("annotation {index}: {source}")]
    Serialize { index: usize, source: BoxError },
}

/// Positive image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, BoxError> {
        if width == 0 || height == 0 {
            return Err(BoxError::ZeroDims(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn transposed(self) -> Self {
        Self {
            width: self.height,
            height: self.width,
        }
    }

    fn w(self) -> f64 {
        f64::from(self.width)
    }

    fn h(self) -> f64 {
        f64::from(self.height)
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned box in corner form. Always finite, non-negative and with
/// strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        let raw = [x_min, y_min, x_max, y_max];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(BoxError::NonFinite(raw));
        }
        if raw.iter().any(|v| *v < 0.0) {
            return Err(BoxError::Negative(raw));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(BoxError::Degenerate(raw));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn fits_within(&self, dims: ImageDims) -> bool {
        self.x_max <= dims.w() && self.y_max <= dims.h()
    }

    pub fn to_normalized(&self, dims: ImageDims) -> Result<NormalizedBox, BoxError> {
        if dims.width == 0 || dims.height == 0 {
            return Err(BoxError::ZeroDims(dims.width, dims.height));
        }
        if !self.fits_within(dims) {
            return Err(BoxError::OutOfBounds {
                bbox: self.to_array(),
                width: dims.width,
                height: dims.height,
            });
        }
        let (w, h) = (dims.w(), dims.h());
        Ok(NormalizedBox {
            cx: (self.x_min + self.x_max) / 2.0 / w,
            cy: (self.y_min + self.y_max) / 2.0 / h,
            w: self.width() / w,
            h: self.height() / h,
        })
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = BoxError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Center-form box with every component expressed as a fraction of the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

// Rounding slack when recovering pixel corners that should sit on the border.
const EDGE_SLACK: f64 = 1e-9;

impl NormalizedBox {
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_corner(&self, dims: ImageDims) -> Result<BoundingBox, BoxError> {
        if dims.width == 0 || dims.height == 0 {
            return Err(BoxError::ZeroDims(dims.width, dims.height));
        }
        let raw = self.to_array();
        if raw
            .iter()
            .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(BoxError::NormalizedRange(raw));
        }
        let (w, h) = (dims.w(), dims.h());
        let x_min = snap(self.cx * w - self.w * w / 2.0, w);
        let x_max = snap(self.cx * w + self.w * w / 2.0, w);
        let y_min = snap(self.cy * h - self.h * h / 2.0, h);
        let y_max = snap(self.cy * h + self.h * h / 2.0, h);
        let bbox = BoundingBox::new(x_min, y_min, x_max, y_max)?;
        if !bbox.fits_within(dims) {
            return Err(BoxError::OutOfBounds {
                bbox: bbox.to_array(),
                width: dims.width,
                height: dims.height,
            });
        }
        Ok(bbox)
    }
}

fn snap(v: f64, limit: f64) -> f64 {
    if v < 0.0 && v > -EDGE_SLACK * limit {
        0.0
    } else if v > limit && v < limit * (1.0 + EDGE_SLACK) {
        limit
    } else {
        v
    }
}

/// Box coordinates in either supported form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoxCoords {
    Corner(BoundingBox),
    Normalized(NormalizedBox),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxForm {
    Corner,
    NormalizedCenter,
}

/// Converts box coordinates between corner-pixel and normalized-center form.
pub fn convert_box(coords: BoxCoords, to: BoxForm, dims: ImageDims) -> Result<BoxCoords, BoxError> {
    if dims.width == 0 || dims.height == 0 {
        return Err(BoxError::ZeroDims(dims.width, dims.height));
    }
    match (coords, to) {
        (BoxCoords::Corner(b), BoxForm::Corner) => {
            if !b.fits_within(dims) {
                return Err(BoxError::OutOfBounds {
                    bbox: b.to_array(),
                    width: dims.width,
                    height: dims.height,
                });
            }
            Ok(coords)
        }
        (BoxCoords::Normalized(n), BoxForm::NormalizedCenter) => {
            n.to_corner(dims)?;
            Ok(coords)
        }
        (BoxCoords::Corner(b), BoxForm::NormalizedCenter) => {
            b.to_normalized(dims).map(BoxCoords::Normalized)
        }
        (BoxCoords::Normalized(n), BoxForm::Corner) => n.to_corner(dims).map(BoxCoords::Corner),
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let overlap_w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let overlap_h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if overlap_w <= 0.0 || overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = overlap_w * overlap_h;
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// A ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "class")]
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl Annotation {
    pub fn new(class_id: u32, bbox: BoundingBox) -> Self {
        Self { class_id, bbox }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("confidence must lie in [0, 1], got {0}")]
pub struct ConfidenceError(pub f64);

/// A predicted object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub class_id: u32,
    pub bbox: BoundingBox,
    confidence: f64,
}

impl Detection {
    pub fn new(class_id: u32, bbox: BoundingBox, confidence: f64) -> Result<Self, ConfidenceError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ConfidenceError(confidence));
        }
        Ok(Self {
            class_id,
            bbox,
            confidence,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    /// The same detection with a replaced box.
    pub fn with_box(self, bbox: BoundingBox) -> Self {
        Self { bbox, ..self }
    }
}

/// One image of a dataset and its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    #[serde(rename = "path")]
    pub relative_path: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    /// Explicit stratum for images without annotations (e.g. healthy plants
    /// labelled only at image level).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_tag: Option<u32>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        relative_path: impl Into<String>,
        width: u32,
        height: u32,
        annotations: Vec<Annotation>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            relative_path: relative_path.into(),
            width,
            height,
            annotations,
            class_tag: None,
        }
    }

    pub fn dims(&self) -> Result<ImageDims, BoxError> {
        ImageDims::new(self.width, self.height)
    }

    /// Class used to stratify this image: first annotation, else the tag.
    pub fn stratum(&self) -> Option<u32> {
        self.annotations
            .first()
            .map(|a| a.class_id)
            .or(self.class_tag)
    }
}

/// One disease class of a taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseClass {
    pub id: u32,
    pub name: String,
    /// Defaults to `name` when left empty.
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub symptom_summary: String,
}

/// Ordered list of classes with ids `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassTaxonomy {
    classes: Vec<DiseaseClass>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    #[serde(rename = "class")]
    classes: Vec<DiseaseClass>,
}

impl ClassTaxonomy {
    pub fn new(mut classes: Vec<DiseaseClass>) -> Result<Self, TaxonomyError> {
        if classes.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        classes.sort_by_key(|c| c.id);
        let mut names = std::collections::HashSet::new();
        for (expected, class) in (0u32..).zip(&classes) {
            if class.id != expected {
                return Err(TaxonomyError::NonContiguous {
                    expected,
                    found: class.id,
                });
            }
            if class.name.is_empty() || class.name.chars().any(char::is_whitespace) {
                return Err(TaxonomyError::BadName(class.name.clone()));
            }
            if !names.insert(class.name.as_str()) {
                return Err(TaxonomyError::DuplicateName(class.name.clone()));
            }
        }
        for class in &mut classes {
            if class.display_name.is_empty() {
                class.display_name = class.name.clone();
            }
        }
        Ok(Self { classes })
    }

    /// Built-in six-class cactus taxonomy. Ids follow the label-file
    /// enumeration: anthracnose, canker, lack of care, aphid, normal,
    /// plant rusts.
    pub fn cactus() -> Self {
        let spec: [(&str, &str, &str); 6] = [
            (
                "anthracnose",
                "Anthracnose",
                "fungal lesions on stem tissue",
            ),
            ("canker", "Canker", "localized dead, scabbed tissue"),
            (
                "lack_of_care",
                "Lack of care",
                "damage from poor growing conditions",
            ),
            ("aphid", "Aphid", "sap-feeding insect infestation"),
            ("normal", "Normal", "no visible disease"),
            ("plant_rusts", "Plant rusts", "rust fungus pustules"),
        ];
        let classes = (0u32..)
            .zip(spec)
            .map(|(id, (name, display, summary))| DiseaseClass {
                id,
                name: name.to_string(),
                display_name: display.to_string(),
                symptom_summary: summary.to_string(),
            })
            .collect();
        Self { classes }
    }

    /// Parses a taxonomy file: a TOML document with one `[[class]]` table
    /// per class carrying `id`, `name`, `display_name`, `symptom_summary`.
    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        Self::new(file.classes)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&TaxonomyFile {
            classes: self.classes.clone(),
        })
        .expect("taxonomy serializes")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[DiseaseClass] {
        &self.classes
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn by_id(&self, id: u32) -> Option<&DiseaseClass> {
        self.classes.get(id as usize)
    }

    pub fn by_name(&self, name: &str) -> Option<&DiseaseClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.classes.len()
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::cactus()
    }
}

/// Label file flavour. Always given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    #[default]
    CornerPixel,
    NormalizedCenter,
}

impl FromStr for LabelFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corner_pixel" | "corner" => Ok(LabelFormat::CornerPixel),
            "normalized_center" | "normalized" => Ok(LabelFormat::NormalizedCenter),
            other => Err(format!(
                "unknown label format {other:?} (expected corner_pixel or normalized_center)"
            )),
        }
    }
}

impl fmt::Display for LabelFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelFormat::CornerPixel => "corner_pixel",
            LabelFormat::NormalizedCenter => "normalized_center",
        })
    }
}

/// Parses a label file. Blank lines and `#` comments are skipped.
pub fn parse_label_file(
    text: &str,
    format: LabelFormat,
    dims: Option<ImageDims>,
) -> Result<Vec<Annotation>, LabelError> {
    if format == LabelFormat::NormalizedCenter && dims.is_none() {
        return Err(LabelError::MissingDims);
    }
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(LabelError::Parse {
                line,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let class_id =
            parse_class(fields[0]).map_err(|message| LabelError::Parse { line, message })?;
        let mut geom = [0.0; 4];
        for (slot, field) in geom.iter_mut().zip(&fields[1..]) {
            *slot = field.parse::<f64>().map_err(|_| LabelError::Parse {
                line,
                message: format!("non-numeric field {field:?}"),
            })?;
        }
        let bbox = match format {
            LabelFormat::CornerPixel => {
                let bbox = BoundingBox::try_from(geom)
                    .map_err(|source| LabelError::Validation { line, source })?;
                if let Some(d) = dims {
                    if !bbox.fits_within(d) {
                        return Err(LabelError::Validation {
                            line,
                            source: BoxError::OutOfBounds {
                                bbox: geom,
                                width: d.width,
                                height: d.height,
                            },
                        });
                    }
                }
                bbox
            }
            LabelFormat::NormalizedCenter => {
                let n = NormalizedBox {
                    cx: geom[0],
                    cy: geom[1],
                    w: geom[2],
                    h: geom[3],
                };
                n.to_corner(dims.expect("checked above"))
                    .map_err(|source| LabelError::Validation { line, source })?
            }
        };
        out.push(Annotation { class_id, bbox });
    }
    Ok(out)
}

fn parse_class(field: &str) -> Result<u32, String> {
    let value: i64 = field
        .parse()
        .map_err(|_| format!("class field {field:?} is not an integer"))?;
    if value < 0 {
        return Err(format!("negative class {value}"));
    }
    u32::try_from(value).map_err(|_| format!("class {value} out of range"))
}

/// Corner coordinates print as integers when integral, else with 6 decimals.
pub fn format_pixel(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.6}")
    }
}

/// Serializes annotations as a label file (one line per object, trailing
/// newline). Normalized values print in shortest round-trip form.
pub fn serialize_label_file(
    annotations: &[Annotation],
    format: LabelFormat,
    dims: Option<ImageDims>,
) -> Result<String, LabelError> {
    let mut out = String::new();
    for (index, ann) in annotations.iter().enumerate() {
        match format {
            LabelFormat::CornerPixel => {
                if let Some(d) = dims {
                    if !ann.bbox.fits_within(d) {
                        return Err(LabelError::Serialize {
                            index,
                            source: BoxError::OutOfBounds {
                                bbox: ann.bbox.to_array(),
                                width: d.width,
                                height: d.height,
                            },
                        });
                    }
                }
                let [a, b, c, d] = ann.bbox.to_array();
                out.push_str(&format!(
                    "{} {} {} {} {}\n",
                    ann.class_id,
                    format_pixel(a),
                    format_pixel(b),
                    format_pixel(c),
                    format_pixel(d)
                ));
            }
            LabelFormat::NormalizedCenter => {
                let d = dims.ok_or(LabelError::MissingDims)?;
                let n = ann
                    .bbox
                    .to_normalized(d)
                    .map_err(|source| LabelError::Serialize { index, source })?;
                out.push_str(&format!(
                    "{} {} {} {} {}\n",
                    ann.class_id, n.cx, n.cy, n.w, n.h
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationRule {
    EmptyImageId,
    ZeroDimension,
    UnknownClass,
    OutOfBounds,
    DuplicateImageId,
    MissingStratum,
    UnlistedImage,
    LabelMismatch,
}

impl fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationRule::EmptyImageId => "empty-image-id",
            ViolationRule::ZeroDimension => "zero-dimension",
            ViolationRule::UnknownClass => "unknown-class",
            ViolationRule::OutOfBounds => "out-of-bounds",
            ViolationRule::DuplicateImageId => "duplicate-image-id",
            ViolationRule::MissingStratum => "missing-stratum",
            ViolationRule::UnlistedImage => "unlisted-image",
            ViolationRule::LabelMismatch => "label-mismatch",
        })
    }
}

/// A broken invariant, reported as data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub image_id: String,
    pub field: String,
    pub rule: ViolationRule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}: {} ({})",
            self.image_id, self.field, self.rule, self.detail
        )
    }
}

/// Checks one record against its type invariants and the taxonomy.
pub fn validate_record(record: &ImageRecord, taxonomy: &ClassTaxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: ViolationRule, detail: String| {
        out.push(Violation {
            image_id: record.image_id.clone(),
            field,
            rule,
            detail,
        })
    };
    if record.image_id.trim().is_empty() {
        push(
            "image_id".into(),
            ViolationRule::EmptyImageId,
            "image id is empty".into(),
        );
    }
    if record.width == 0 || record.height == 0 {
        push(
            "width/height".into(),
            ViolationRule::ZeroDimension,
            format!(
                "dimensions {}x{} must be positive",
                record.width, record.height
            ),
        );
    }
    if let Some(tag) = record.class_tag {
        if !taxonomy.contains(tag) {
            push(
                "class_tag".into(),
                ViolationRule::UnknownClass,
                format!("class {tag} not in {}-class taxonomy", taxonomy.len()),
            );
        }
    }
    for (i, ann) in record.annotations.iter().enumerate() {
        if !taxonomy.contains(ann.class_id) {
            push(
                format!("annotations[{i}].class"),
                ViolationRule::UnknownClass,
                format!(
                    "class {} not in {}-class taxonomy",
                    ann.class_id,
                    taxonomy.len()
                ),
            );
        }
        let b = ann.bbox;
        if b.x_max() > f64::from(record.width) || b.y_max() > f64::from(record.height) {
            push(
                format!("annotations[{i}].box"),
                ViolationRule::OutOfBounds,
                format!(
                    "box {:?} exceeds image {}x{}",
                    b.to_array(),
                    record.width,
                    record.height
                ),
            );
        }
    }
    out
}
