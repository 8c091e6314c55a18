//! Dataset manifests, stratified splitting, rotation augmentation and the
//! on-disk training layout.
//!
//! A manifest is persisted as JSON lines, one image per line:
//!
//! ```text
//! {"image_id":"a01","path":"images/a01.jpg","width":640,"height":480,
//!  "annotations":[{"class":0,"box":[10.0,5.0,30.0,25.0]}],"split":"train","lineage":null}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{
    parse_label_file, serialize_label_file, validate_record, Annotation, BoundingBox, BoxError,
    ClassTaxonomy, ImageDims, ImageRecord, LabelError, LabelFormat, Violation, ViolationRule,
};
use crate::par::{self, Execution};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("split assignment for unknown image {0:?}")]
    UnknownAssignment(String),
    #[error("image {image_id:?} has lineage base {base_id:?} which is not in the manifest")]
    UnknownLineageBase { image_id: String, base_id: String },
    #[error("rotation must be one of 90, 180, 270 degrees (0 allowed in lineage), got {0}")]
    BadRotation(u32),
    #[error("manifest line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("image {0:?} has neither annotations nor a class tag to stratify on")]
    NoStratum(String),
    #[error("image {image_id:?} uses class {class_id}, not in the taxonomy")]
    UnknownClass { image_id: String, class_id: u32 },
    #[error("class {class:?} has {count} record(s); the split needs at least {needed}")]
    TooFewRecords {
        class: String,
        count: usize,
        needed: usize,
    },
    #[error("image {0:?} is already a rotated copy; augmentation cannot be applied twice")]
    AlreadyAugmented(String),
    #[error("image {0:?} has no split assignment")]
    Unassigned(String),
    #[error("image id {0:?} cannot be used as a file name")]
    InvalidImageId(String),
    #[error("image {image_id:?}: {source}")]
    Geometry { image_id: String, source: BoxError },
    #[error("{path}: {source}")]
    Label { path: PathBuf, source: LabelError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Where an image came from: the base image and the clockwise rotation
/// applied to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub base_id: String,
    pub rotation: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    assignments: BTreeMap<String, Split>,
    lineage: BTreeMap<String, Lineage>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    #[serde(flatten)]
    record: ImageRecord,
    #[serde(default)]
    split: Option<Split>,
    #[serde(default)]
    lineage: Option<Lineage>,
}

impl DatasetManifest {
    pub fn new(
        records: Vec<ImageRecord>,
        assignments: BTreeMap<String, Split>,
        lineage: BTreeMap<String, Lineage>,
    ) -> Result<Self, DatasetError> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.image_id.as_str()) {
                return Err(DatasetError::DuplicateImageId(r.image_id.clone()));
            }
        }
        if let Some(id) = assignments.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(DatasetError::UnknownAssignment(id.clone()));
        }
        for (image_id, l) in &lineage {
            if !ids.contains(image_id.as_str()) || !ids.contains(l.base_id.as_str()) {
                return Err(DatasetError::UnknownLineageBase {
                    image_id: image_id.clone(),
                    base_id: l.base_id.clone(),
                });
            }
            if !matches!(l.rotation, 0 | 90 | 180 | 270) {
                return Err(DatasetError::BadRotation(l.rotation));
            }
        }
        Ok(Self {
            records,
            assignments,
            lineage,
        })
    }

    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        Self::new(records, BTreeMap::new(), BTreeMap::new())
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn assignments(&self) -> &BTreeMap<String, Split> {
        &self.assignments
    }

    pub fn lineage(&self) -> &BTreeMap<String, Lineage> {
        &self.lineage
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.assignments.get(image_id).copied()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Records sorted by image id, optionally restricted to one split.
    pub fn sorted_records(&self, split: Option<Split>) -> Vec<&ImageRecord> {
        let mut out: Vec<&ImageRecord> = self
            .records
            .iter()
            .filter(|r| split.is_none() || self.split_of(&r.image_id) == split)
            .collect();
        out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        out
    }

    /// A manifest holding only the records of one split.
    pub fn filter_split(&self, split: Split) -> DatasetManifest {
        let records: Vec<ImageRecord> = self
            .records
            .iter()
            .filter(|r| self.split_of(&r.image_id) == Some(split))
            .cloned()
            .collect();
        let keep: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        let assignments = self
            .assignments
            .iter()
            .filter(|(k, _)| keep.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        let lineage = self
            .lineage
            .iter()
            .filter(|(k, l)| keep.contains(k.as_str()) && keep.contains(l.base_id.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        DatasetManifest {
            records,
            assignments,
            lineage,
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        let mut assignments = BTreeMap::new();
        let mut lineage = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: ManifestLine = serde_json::from_str(raw).map_err(|e| DatasetError::Json {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if let Some(s) = line.split {
                assignments.insert(line.record.image_id.clone(), s);
            }
            if let Some(l) = line.lineage {
                lineage.insert(line.record.image_id.clone(), l);
            }
            records.push(line.record);
        }
        Self::new(records, assignments, lineage)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = ManifestLine {
                record: r.clone(),
                split: self.split_of(&r.image_id),
                lineage: self.lineage.get(&r.image_id).cloned(),
            };
            out.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }
}

/// Lists every violation in manifest text instead of stopping at the first.
/// Only malformed lines are hard errors.
pub fn validate_manifest(
    text: &str,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<Violation>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: ManifestLine = serde_json::from_str(raw).map_err(|e| DatasetError::Json {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let r = line.record;
        if !seen.insert(r.image_id.clone()) {
            out.push(Violation {
                image_id: r.image_id.clone(),
                field: "image_id".into(),
                rule: ViolationRule::DuplicateImageId,
                detail: format!("line {} repeats an earlier id", idx + 1),
            });
        }
        if r.stratum().is_none() {
            out.push(Violation {
                image_id: r.image_id.clone(),
                field: "class_tag".into(),
                rule: ViolationRule::MissingStratum,
                detail: "no annotations and no class tag".into(),
            });
        }
        out.extend(validate_record(&r, taxonomy));
    }
    Ok(out)
}

/// Split fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    /// Keep every rotation of one base image in the same split.
    pub group_augmented: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            seed: 0,
            group_augmented: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(DatasetError::InvalidSpec(format!(
                "fractions must be positive, got {fracs:?}"
            )));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidSpec(format!(
                "fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` for a stratum of `n` units: val and test are
    /// rounded up, train takes the remainder.
    pub fn counts(&self, n: usize) -> Option<(usize, usize, usize)> {
        let val = ceil_count(self.val_frac, n);
        let test = ceil_count(self.test_frac, n);
        let train = n.checked_sub(val + test)?;
        Some((train, val, test))
    }
}

// Products like 0.2 * 140 land a hair above the integer in binary.
fn ceil_count(frac: f64, n: usize) -> usize {
    (frac * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Assigns every record to train/val/test, stratified by class.
pub fn split_dataset(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
    taxonomy: &ClassTaxonomy,
) -> Result<DatasetManifest, DatasetError> {
    spec.validate()?;

    // unit key -> member record indices; a unit is one image, or one base
    // image plus its rotations when grouping.
    let mut units: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let key = if spec.group_augmented {
            manifest
                .lineage
                .get(&r.image_id)
                .map_or(r.image_id.as_str(), |l| l.base_id.as_str())
        } else {
            r.image_id.as_str()
        };
        units.entry(key).or_default().push(i);
    }

    let mut strata: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for (key, members) in &units {
        let head = manifest.get(key).unwrap_or(&manifest.records[members[0]]);
        let class_id = head
            .stratum()
            .ok_or_else(|| DatasetError::NoStratum(head.image_id.clone()))?;
        if !taxonomy.contains(class_id) {
            return Err(DatasetError::UnknownClass {
                image_id: head.image_id.clone(),
                class_id,
            });
        }
        strata.entry(class_id).or_default().push(key);
    }

    let mut assignments = BTreeMap::new();
    for (class_id, mut keys) in strata {
        let n = keys.len();
        let (_, val, test) = spec.counts(n).ok_or_else(|| DatasetError::TooFewRecords {
            class: taxonomy
                .by_id(class_id)
                .map_or_else(|| class_id.to_string(), |c| c.name.clone()),
            count: n,
            needed: ceil_count(spec.val_frac, n) + ceil_count(spec.test_frac, n),
        })?;
        let mut rng = stream_rng(spec.seed, &format!("split/class/{class_id}"));
        keys.shuffle(&mut rng);
        for (pos, key) in keys.iter().enumerate() {
            let split = if pos < val {
                Split::Val
            } else if pos < val + test {
                Split::Test
            } else {
                Split::Train
            };
            for &i in &units[key] {
                assignments.insert(manifest.records[i].image_id.clone(), split);
            }
        }
    }

    Ok(DatasetManifest {
        records: manifest.records.clone(),
        assignments,
        lineage: manifest.lineage.clone(),
    })
}

/// Rotates a box clockwise by a right angle inside an image of `dims`.
///
/// 90 degrees maps `(x, y)` to `(H - y, x)` and swaps the dimensions.
pub fn rotate_box(
    bbox: &BoundingBox,
    degrees: u32,
    dims: ImageDims,
) -> Result<(BoundingBox, ImageDims), DatasetError> {
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    let [x1, y1, x2, y2] = bbox.to_array();
    let (raw, new_dims) = match degrees {
        90 => ([h - y2, x1, h - y1, x2], dims.transposed()),
        180 => ([w - x2, h - y2, w - x1, h - y1], dims),
        270 => ([y1, w - x2, y2, w - x1], dims.transposed()),
        other => return Err(DatasetError::BadRotation(other)),
    };
    let rotated = BoundingBox::try_from(raw).map_err(|source| DatasetError::Geometry {
        image_id: String::new(),
        source,
    })?;
    Ok((rotated, new_dims))
}

/// Rotates every annotation of a record; the image id and path are kept.
pub fn rotate_record(record: &ImageRecord, degrees: u32) -> Result<ImageRecord, DatasetError> {
    let dims = record.dims().map_err(|source| DatasetError::Geometry {
        image_id: record.image_id.clone(),
        source,
    })?;
    let new_dims = match degrees {
        90 | 270 => dims.transposed(),
        180 => dims,
        other => return Err(DatasetError::BadRotation(other)),
    };
    let mut out = record.clone();
    for ann in &mut out.annotations {
        let (b, _) = rotate_box(&ann.bbox, degrees, dims).map_err(|e| match e {
            DatasetError::Geometry { source, .. } => DatasetError::Geometry {
                image_id: record.image_id.clone(),
                source,
            },
            other => other,
        })?;
        ann.bbox = b;
    }
    out.width = new_dims.width;
    out.height = new_dims.height;
    Ok(out)
}

fn rotated_path(path: &str, degrees: u32) -> String {
    let p = Path::new(path);
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or(path);
    let name = match p.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_r{degrees}.{ext}"),
        None => format!("{stem}_r{degrees}"),
    };
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => dir.join(name).to_string_lossy().into_owned(),
        None => name,
    }
}

/// Adds one rotated copy of every record per angle. Rotated copies are
/// named `<base>_r<angle>` and inherit the base image's split, if any.
pub fn augment_rotations(
    manifest: &DatasetManifest,
    angles: &[u32],
) -> Result<DatasetManifest, DatasetError> {
    if let Some(bad) = angles.iter().find(|a| !matches!(a, 90 | 180 | 270)) {
        return Err(DatasetError::BadRotation(*bad));
    }
    if let Some((id, _)) = manifest.lineage.iter().find(|(_, l)| l.rotation != 0) {
        return Err(DatasetError::AlreadyAugmented(id.clone()));
    }
    let mut records = Vec::with_capacity(manifest.len() * (1 + angles.len()));
    let mut assignments = manifest.assignments.clone();
    let mut lineage = manifest.lineage.clone();
    let mut seen: HashSet<String> = manifest
        .records
        .iter()
        .map(|r| r.image_id.clone())
        .collect();
    for base in &manifest.records {
        records.push(base.clone());
        for &angle in angles {
            let mut rotated = rotate_record(base, angle)?;
            rotated.image_id = format!("{}_r{angle}", base.image_id);
            rotated.relative_path = rotated_path(&base.relative_path, angle);
            if !seen.insert(rotated.image_id.clone()) {
                return Err(DatasetError::DuplicateImageId(rotated.image_id));
            }
            if let Some(split) = manifest.split_of(&base.image_id) {
                assignments.insert(rotated.image_id.clone(), split);
            }
            lineage.insert(
                rotated.image_id.clone(),
                Lineage {
                    base_id: base.image_id.clone(),
                    rotation: angle,
                },
            );
            records.push(rotated);
        }
    }
    DatasetManifest::new(records, assignments, lineage)
}

/// Result of writing the training directory layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutSummary {
    pub root: PathBuf,
    pub description_file: PathBuf,
    pub label_files: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub images_copied: usize,
    /// Image ids whose source image was not found; their label files are
    /// written and the image slot is left for an external tool.
    pub missing_images: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LayoutOptions {
    pub format: LabelFormat,
    /// Directory that `relative_path` entries are resolved against.
    pub image_source: Option<PathBuf>,
    pub exec: Execution,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        Self {
            format: LabelFormat::CornerPixel,
            image_source: None,
            exec: Execution::Auto,
        }
    }
}

pub const DESCRIPTION_FILE: &str = "data.yaml";

/// Writes `root/{images,labels}/{train,val,test}`, one label file per record
/// and a dataset description file listing split directories and class names.
pub fn materialize_layout(
    manifest: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
    root: &Path,
    options: &LayoutOptions,
) -> Result<LayoutSummary, DatasetError> {
    let records = manifest.sorted_records(None);
    for r in &records {
        if manifest.split_of(&r.image_id).is_none() {
            return Err(DatasetError::Unassigned(r.image_id.clone()));
        }
        if r.image_id.is_empty() || r.image_id.contains(['/', '\\']) || r.image_id.starts_with('.')
        {
            return Err(DatasetError::InvalidImageId(r.image_id.clone()));
        }
    }
    for kind in ["images", "labels"] {
        for split in Split::ALL {
            let dir = root.join(kind).join(split.as_str());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }

    let copied = par::try_map(options.exec, &records, |r| {
        write_one(manifest, r, root, options)
    })?;

    let mut per_split: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
    for r in &records {
        *per_split
            .get_mut(&manifest.split_of(&r.image_id).expect("checked"))
            .expect("all splits present") += 1;
    }
    let missing_images: Vec<String> = records
        .iter()
        .zip(&copied)
        .filter(|(_, c)| !**c)
        .map(|(r, _)| r.image_id.clone())
        .collect();

    let description_file = root.join(DESCRIPTION_FILE);
    fs::write(&description_file, describe_layout(root, taxonomy))
        .map_err(io_err(&description_file))?;

    Ok(LayoutSummary {
        root: root.to_path_buf(),
        description_file,
        label_files: records.len(),
        per_split,
        images_copied: copied.iter().filter(|c| **c).count(),
        missing_images,
    })
}

fn write_one(
    manifest: &DatasetManifest,
    record: &ImageRecord,
    root: &Path,
    options: &LayoutOptions,
) -> Result<bool, DatasetError> {
    let split = manifest.split_of(&record.image_id).expect("checked");
    let dims = record.dims().map_err(|source| DatasetError::Geometry {
        image_id: record.image_id.clone(),
        source,
    })?;
    let label_path = root
        .join("labels")
        .join(split.as_str())
        .join(format!("{}.txt", record.image_id));
    let text = serialize_label_file(&record.annotations, options.format, Some(dims)).map_err(
        |source| DatasetError::Label {
            path: label_path.clone(),
            source,
        },
    )?;
    fs::write(&label_path, text).map_err(io_err(&label_path))?;

    let Some(source_root) = &options.image_source else {
        return Ok(false);
    };
    let source = source_root.join(&record.relative_path);
    if !source.is_file() {
        return Ok(false);
    }
    let file_name = match source.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{}.{ext}", record.image_id),
        None => record.image_id.clone(),
    };
    let dest = root.join("images").join(split.as_str()).join(file_name);
    fs::copy(&source, &dest).map_err(io_err(&dest))?;
    Ok(true)
}

/// Dataset description text consumed by external training tools.
pub fn describe_layout(root: &Path, taxonomy: &ClassTaxonomy) -> String {
    let names: Vec<String> = taxonomy
        .classes()
        .iter()
        .map(|c| format!("'{}'", c.name))
        .collect();
    format!(
        "# dataset description written by cactuskit {}\n\
         path: {}\n\
         train: images/train\n\
         val: images/val\n\
         test: images/test\n\
         nc: {}\n\
         names: [{}]\n",
        crate::TOOL_VERSION,
        root.display(),
        taxonomy.len(),
        names.join(", ")
    )
}

/// Reads back every label file of a written layout, keyed by image id.
/// Normalized labels need the manifest for image dimensions.
pub fn read_layout(
    root: &Path,
    format: LabelFormat,
    manifest: Option<&DatasetManifest>,
) -> Result<BTreeMap<String, (Split, Vec<Annotation>)>, DatasetError> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let dir = root.join("labels").join(split.as_str());
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io_err(&dir))?;
        entries.sort();
        for path in entries {
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(image_id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
            else {
                continue;
            };
            let dims = manifest
                .and_then(|m| m.get(&image_id))
                .and_then(|r| r.dims().ok());
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let anns =
                parse_label_file(&text, format, dims).map_err(|source| DatasetError::Label {
                    path: path.clone(),
                    source,
                })?;
            out.insert(image_id, (split, anns));
        }
    }
    Ok(out)
}

/// Compares a written layout with the manifest it should mirror: every label
/// file must belong to a listed image, sit in that image's split and carry
/// its annotations (coordinates within 1e-6), and every assigned image must
/// have a label file. Corner labels are read without a bounds check so that
/// oversized boxes show up as violations.
pub fn validate_layout(
    root: &Path,
    format: LabelFormat,
    manifest: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<Violation>, DatasetError> {
    let dims_from = (format == LabelFormat::NormalizedCenter).then_some(manifest);
    let on_disk = read_layout(root, format, dims_from)?;
    let mut out = Vec::new();
    let violation = |image_id: &str, field: &str, rule: ViolationRule, detail: String| Violation {
        image_id: image_id.to_string(),
        field: field.to_string(),
        rule,
        detail,
    };
    for (image_id, (split, anns)) in &on_disk {
        let Some(record) = manifest.get(image_id) else {
            out.push(violation(
                image_id,
                "labels",
                ViolationRule::UnlistedImage,
                format!("labels/{split}/{image_id}.txt has no manifest record"),
            ));
            continue;
        };
        match manifest.split_of(image_id) {
            Some(s) if s == *split => {}
            other => out.push(violation(
                image_id,
                "split",
                ViolationRule::LabelMismatch,
                format!(
                    "label file is under {split}, manifest says {}",
                    other.map_or("unassigned", Split::as_str)
                ),
            )),
        }
        let same = anns.len() == record.annotations.len()
            && anns.iter().zip(&record.annotations).all(|(a, b)| {
                a.class_id == b.class_id
                    && a.bbox
                        .to_array()
                        .iter()
                        .zip(b.bbox.to_array())
                        .all(|(x, y)| (x - y).abs() <= 1e-6)
            });
        if !same {
            out.push(violation(
                image_id,
                "annotations",
                ViolationRule::LabelMismatch,
                format!(
                    "label file has {} object(s), manifest has {}",
                    anns.len(),
                    record.annotations.len()
                ),
            ));
        }
        let mut as_labelled = record.clone();
        as_labelled.annotations = anns.clone();
        for mut v in validate_record(&as_labelled, taxonomy) {
            if v.field.starts_with("annotations") {
                v.field = format!("labels/{}", v.field);
                out.push(v);
            }
        }
    }
    for (image_id, split) in manifest.assignments() {
        if !on_disk.contains_key(image_id) {
            out.push(violation(
                image_id,
                "labels",
                ViolationRule::LabelMismatch,
                format!("no label file under labels/{split}"),
            ));
        }
    }
    Ok(out)
}

/// One row of the per-class split table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsRow {
    pub label: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unsplit: usize,
}

impl StatsRow {
    fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            train: 0,
            val: 0,
            test: 0,
            unsplit: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.unsplit
    }

    fn bump(&mut self, split: Option<Split>) {
        match split {
            Some(Split::Train) => self.train += 1,
            Some(Split::Val) => self.val += 1,
            Some(Split::Test) => self.test += 1,
            None => self.unsplit += 1,
        }
    }
}

/// Per-class x per-split image counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub rows: Vec<StatsRow>,
    /// Images whose stratum is missing or outside the taxonomy.
    pub unclassified: Option<StatsRow>,
    pub total: StatsRow,
}

pub fn stats(manifest: &DatasetManifest, taxonomy: &ClassTaxonomy) -> SplitStats {
    let mut rows: Vec<StatsRow> = taxonomy
        .classes()
        .iter()
        .map(|c| StatsRow::new(c.display_name.clone()))
        .collect();
    let mut unclassified = StatsRow::new("(unclassified)");
    let mut total = StatsRow::new("Total");
    for r in &manifest.records {
        let split = manifest.split_of(&r.image_id);
        match r.stratum().filter(|c| taxonomy.contains(*c)) {
            Some(c) => rows[c as usize].bump(split),
            None => unclassified.bump(split),
        }
        total.bump(split);
    }
    SplitStats {
        rows,
        unclassified: (unclassified.total() > 0).then_some(unclassified),
        total,
    }
}

impl SplitStats {
    fn all_rows(&self) -> impl Iterator<Item = &StatsRow> {
        self.rows
            .iter()
            .chain(self.unclassified.iter())
            .chain(std::iter::once(&self.total))
    }

    /// Aligned text table: `Class Train Test Validation [Unsplit] Total`.
    pub fn render_text(&self) -> String {
        let show_unsplit = self.total.unsplit > 0;
        let mut header = vec!["Class", "Train", "Test", "Validation"];
        if show_unsplit {
            header.push("Unsplit");
        }
        header.push("Total");
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for row in self.all_rows() {
            let mut cells = vec![
                row.label.clone(),
                row.train.to_string(),
                row.test.to_string(),
                row.val.to_string(),
            ];
            if show_unsplit {
                cells.push(row.unsplit.to_string());
            }
            cells.push(row.total().to_string());
            table.push(cells);
        }
        crate::report::align_table(&table)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,train,val,test,unsplit,total\n");
        for row in self.all_rows() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.label,
                row.train,
                row.val,
                row.test,
                row.unsplit,
                row.total()
            ));
        }
        out
    }
}

/// Image ids grouped by their base image (rotations with their source).
pub fn lineage_groups(manifest: &DatasetManifest) -> BTreeMap<String, BTreeSet<String>> {
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in &manifest.records {
        let base = manifest
            .lineage
            .get(&r.image_id)
            .map_or(r.image_id.clone(), |l| l.base_id.clone());
        groups.entry(base).or_default().insert(r.image_id.clone());
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_validation_collects_everything() {
        let tax = ClassTaxonomy::cactus();
        let text = concat!(
            r#"{"image_id":"a","path":"a.jpg","width":10,"height":10,"annotations":[{"class":9,"box":[0,0,20,5]}]}"#,
            "\n",
            r#"{"image_id":"a","path":"a.jpg","width":10,"height":10,"annotations":[]}"#,
            "\n",
        );
        let v = validate_manifest(text, &tax).unwrap();
        let rules: Vec<_> = v.iter().map(|v| v.rule.to_string()).collect();
        assert_eq!(
            rules,
            [
                "unknown-class",
                "out-of-bounds",
                "duplicate-image-id",
                "missing-stratum"
            ]
        );
        assert!(matches!(
            validate_manifest("{", &tax),
            Err(DatasetError::Json { line: 1, .. })
        ));
    }

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn record(id: &str, class_id: u32) -> ImageRecord {
        ImageRecord::new(
            id,
            format!("images/{id}.jpg"),
            100,
            50,
            vec![Annotation::new(class_id, bb(10.0, 5.0, 30.0, 25.0))],
        )
    }

    fn class_manifest(sizes: &[usize]) -> DatasetManifest {
        let mut records = Vec::new();
        for (class_id, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                records.push(record(&format!("c{class_id}_{i:04}"), class_id as u32));
            }
        }
        DatasetManifest::from_records(records).unwrap()
    }

    #[test]
    fn count_rule_matches_class_table() {
        let spec = SplitSpec::default();
        assert_eq!(spec.counts(136), Some((80, 28, 28)));
        assert_eq!(spec.counts(152), Some((90, 31, 31)));
        assert_eq!(spec.counts(164), Some((98, 33, 33)));
        assert_eq!(spec.counts(140), Some((84, 28, 28)));
        assert_eq!(spec.counts(168), Some((100, 34, 34)));
        assert_eq!(spec.counts(5), Some((3, 1, 1)));
        assert_eq!(spec.counts(2), Some((0, 1, 1)));
        assert_eq!(spec.counts(1), None);
        assert_eq!(spec.counts(0), Some((0, 0, 0)));
    }

    #[test]
    fn split_small_class() {
        let m = class_manifest(&[5]);
        let out = split_dataset(&m, &SplitSpec::default(), &ClassTaxonomy::cactus()).unwrap();
        let s = stats(&out, &ClassTaxonomy::cactus());
        assert_eq!((s.rows[0].train, s.rows[0].val, s.rows[0].test), (3, 1, 1));
    }

    #[test]
    fn split_too_small_class_names_it() {
        let m = class_manifest(&[5, 1]);
        match split_dataset(&m, &SplitSpec::default(), &ClassTaxonomy::cactus()) {
            Err(DatasetError::TooFewRecords {
                class,
                count: 1,
                needed: 2,
            }) => {
                assert_eq!(class, "canker")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_requires_a_stratum() {
        let mut r = record("x", 0);
        r.annotations.clear();
        let m = DatasetManifest::from_records(vec![r.clone()]).unwrap();
        assert!(matches!(
            split_dataset(&m, &SplitSpec::default(), &ClassTaxonomy::cactus()),
            Err(DatasetError::NoStratum(_))
        ));
        r.class_tag = Some(4);
        let mut records = vec![r];
        for i in 0..4 {
            let mut t = record(&format!("y{i}"), 0);
            t.annotations.clear();
            t.class_tag = Some(4);
            records.push(t);
        }
        let m = DatasetManifest::from_records(records).unwrap();
        let out = split_dataset(&m, &SplitSpec::default(), &ClassTaxonomy::cactus()).unwrap();
        assert_eq!(out.assignments().len(), 5);
    }

    #[test]
    fn split_spec_validation() {
        let bad = SplitSpec {
            train_frac: 0.5,
            ..SplitSpec::default()
        };
        assert!(matches!(bad.validate(), Err(DatasetError::InvalidSpec(_))));
        let neg = SplitSpec {
            train_frac: 1.0,
            val_frac: 0.2,
            test_frac: -0.2,
            ..SplitSpec::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn split_is_independent_of_input_order() {
        let m = class_manifest(&[20, 13]);
        let mut reversed: Vec<ImageRecord> = m.records().to_vec();
        reversed.reverse();
        let r = DatasetManifest::from_records(reversed).unwrap();
        let spec = SplitSpec {
            seed: 99,
            ..SplitSpec::default()
        };
        let tax = ClassTaxonomy::cactus();
        let a = split_dataset(&m, &spec, &tax).unwrap();
        let b = split_dataset(&r, &spec, &tax).unwrap();
        assert_eq!(a.assignments(), b.assignments());
        let c = split_dataset(&m, &SplitSpec { seed: 100, ..spec }, &tax).unwrap();
        assert_ne!(a.assignments(), c.assignments());
    }

    #[test]
    fn grouped_split_keeps_rotations_together() {
        let base = class_manifest(&[10, 10]);
        let aug = augment_rotations(&base, &[90, 180, 270]).unwrap();
        let spec = SplitSpec {
            group_augmented: true,
            seed: 3,
            ..SplitSpec::default()
        };
        let out = split_dataset(&aug, &spec, &ClassTaxonomy::cactus()).unwrap();
        for (_, members) in lineage_groups(&out) {
            let splits: BTreeSet<Split> =
                members.iter().map(|m| out.split_of(m).unwrap()).collect();
            assert_eq!(splits.len(), 1);
        }
        let s = stats(&out, &ClassTaxonomy::cactus());
        // 10 groups per class -> 2/2/6 groups -> x4 images
        assert_eq!((s.rows[0].train, s.rows[0].val, s.rows[0].test), (24, 8, 8));
    }

    #[test]
    fn rotate_box_examples() {
        let dims = ImageDims::new(100, 50).unwrap();
        let b = bb(10.0, 5.0, 30.0, 25.0);
        let (r90, d90) = rotate_box(&b, 90, dims).unwrap();
        assert_eq!(r90.to_array(), [25.0, 10.0, 45.0, 30.0]);
        assert_eq!(d90, ImageDims::new(50, 100).unwrap());
        let (r180, d180) = rotate_box(&b, 180, dims).unwrap();
        assert_eq!(r180.to_array(), [70.0, 25.0, 90.0, 45.0]);
        assert_eq!(d180, dims);
        let (r270, _) = rotate_box(&b, 270, dims).unwrap();
        let (back, _) = rotate_box(&r270, 90, dims.transposed()).unwrap();
        assert_eq!(back, b);

        let mut cur = (b, dims);
        for _ in 0..4 {
            cur = rotate_box(&cur.0, 90, cur.1).unwrap();
        }
        assert_eq!(cur, (b, dims));
        assert!(matches!(
            rotate_box(&b, 45, dims),
            Err(DatasetError::BadRotation(45))
        ));
        assert!(matches!(
            rotate_box(&b, 0, dims),
            Err(DatasetError::BadRotation(0))
        ));
    }

    #[test]
    fn augment_two_records_by_180() {
        let m = DatasetManifest::from_records(vec![record("a", 0), record("b", 1)]).unwrap();
        let out = augment_rotations(&m, &[180]).unwrap();
        let ids: Vec<&str> = out.records().iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "a_r180", "b", "b_r180"]);
        assert_eq!(
            out.lineage().get("a_r180"),
            Some(&Lineage {
                base_id: "a".into(),
                rotation: 180
            })
        );
        assert_eq!(out.lineage().len(), 2);
        assert_eq!(
            out.get("b_r180").unwrap().relative_path,
            "images/b_r180.jpg"
        );
        assert_eq!(
            out.get("a_r180").unwrap().annotations[0].bbox.to_array(),
            [70.0, 25.0, 90.0, 45.0]
        );
    }

    #[test]
    fn augment_identity_and_errors() {
        let m = DatasetManifest::from_records(vec![record("a", 0)]).unwrap();
        assert_eq!(augment_rotations(&m, &[]).unwrap(), m);
        let once = augment_rotations(&m, &[90]).unwrap();
        assert!(matches!(
            augment_rotations(&once, &[90]),
            Err(DatasetError::AlreadyAugmented(_))
        ));
        assert!(matches!(
            augment_rotations(&m, &[90, 90]),
            Err(DatasetError::DuplicateImageId(_))
        ));
        assert!(matches!(
            augment_rotations(&m, &[45]),
            Err(DatasetError::BadRotation(45))
        ));
        let clash =
            DatasetManifest::from_records(vec![record("a", 0), record("a_r90", 0)]).unwrap();
        assert!(matches!(
            augment_rotations(&clash, &[90]),
            Err(DatasetError::DuplicateImageId(_))
        ));
    }

    #[test]
    fn manifest_invariants() {
        assert!(matches!(
            DatasetManifest::from_records(vec![record("a", 0), record("a", 1)]),
            Err(DatasetError::DuplicateImageId(_))
        ));
        let mut assignments = BTreeMap::new();
        assignments.insert("zzz".to_string(), Split::Train);
        assert!(matches!(
            DatasetManifest::new(vec![record("a", 0)], assignments, BTreeMap::new()),
            Err(DatasetError::UnknownAssignment(_))
        ));
        let mut lineage = BTreeMap::new();
        lineage.insert(
            "a".to_string(),
            Lineage {
                base_id: "nope".into(),
                rotation: 90,
            },
        );
        assert!(matches!(
            DatasetManifest::new(vec![record("a", 0)], BTreeMap::new(), lineage),
            Err(DatasetError::UnknownLineageBase { .. })
        ));
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let m = class_manifest(&[6, 6]);
        let aug = augment_rotations(&m, &[90]).unwrap();
        let split = split_dataset(&aug, &SplitSpec::default(), &ClassTaxonomy::cactus()).unwrap();
        let text = split.to_jsonl();
        let back = DatasetManifest::from_jsonl(&text).unwrap();
        assert_eq!(back, split);
        assert_eq!(back.to_jsonl(), text);
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with(r#"{"image_id":"c0_0000","path":"images/c0_0000.jpg","width":100"#)
        );
    }

    #[test]
    fn manifest_bad_line_reports_line_number() {
        let text = format!("{}\n{{not json}}\n", class_manifest(&[1]).to_jsonl().trim());
        assert!(matches!(
            DatasetManifest::from_jsonl(&text),
            Err(DatasetError::Json { line: 2, .. })
        ));
        let bad_box = r#"{"image_id":"a","path":"a.jpg","width":10,"height":10,"annotations":[{"class":0,"box":[5,5,1,1]}]}"#;
        assert!(matches!(
            DatasetManifest::from_jsonl(bad_box),
            Err(DatasetError::Json { line: 1, .. })
        ));
    }

    #[test]
    fn stats_empty_and_unsplit() {
        let tax = ClassTaxonomy::cactus();
        let s = stats(&DatasetManifest::default(), &tax);
        assert!(s.rows.iter().all(|r| r.total() == 0));
        assert_eq!(s.total.total(), 0);

        let one = DatasetManifest::from_records(vec![record("a", 2)]).unwrap();
        let s = stats(&one, &tax);
        assert_eq!(s.rows[2].unsplit, 1);
        assert_eq!(s.total.unsplit, 1);
        assert!(s.render_text().lines().next().unwrap().contains("Unsplit"));
    }

    #[test]
    fn materialize_requires_assignments() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::from_records(vec![record("a", 0)]).unwrap();
        assert!(matches!(
            materialize_layout(
                &m,
                &ClassTaxonomy::cactus(),
                dir.path(),
                &LayoutOptions::default()
            ),
            Err(DatasetError::Unassigned(_))
        ));
    }

    #[test]
    fn materialize_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let summary = materialize_layout(
            &DatasetManifest::default(),
            &ClassTaxonomy::cactus(),
            dir.path(),
            &LayoutOptions::default(),
        )
        .unwrap();
        assert_eq!(summary.label_files, 0);
        for kind in ["images", "labels"] {
            for split in Split::ALL {
                assert!(dir.path().join(kind).join(split.as_str()).is_dir());
            }
        }
        let desc = fs::read_to_string(dir.path().join(DESCRIPTION_FILE)).unwrap();
        assert!(desc.contains("nc: 6\n"));
        assert!(desc.contains(
            "names: ['anthracnose', 'canker', 'lack_of_care', 'aphid', 'normal', 'plant_rusts']"
        ));
    }

    #[test]
    fn materialize_and_rescan() {
        let dir = tempfile::tempdir().unwrap();
        let src = tempfile::tempdir().unwrap();
        fs::create_dir_all(src.path().join("images")).unwrap();
        fs::write(src.path().join("images/c0_0000.jpg"), b"jpeg").unwrap();

        let m = class_manifest(&[3, 3]);
        let mut assignments = BTreeMap::new();
        for (i, r) in m.records().iter().enumerate() {
            assignments.insert(r.image_id.clone(), Split::ALL[i % 3]);
        }
        let m = DatasetManifest::new(m.records().to_vec(), assignments, BTreeMap::new()).unwrap();
        let opts = LayoutOptions {
            image_source: Some(src.path().to_path_buf()),
            ..LayoutOptions::default()
        };
        let summary = materialize_layout(&m, &ClassTaxonomy::cactus(), dir.path(), &opts).unwrap();
        assert_eq!(summary.label_files, 6);
        assert_eq!(summary.per_split[&Split::Train], 2);
        assert_eq!(summary.images_copied, 1);
        assert_eq!(summary.missing_images.len(), 5);
        assert!(dir.path().join("images/train/c0_0000.jpg").is_file());

        let back = read_layout(dir.path(), LabelFormat::CornerPixel, None).unwrap();
        assert_eq!(back.len(), 6);
        for r in m.records() {
            let (split, anns) = &back[&r.image_id];
            assert_eq!(Some(*split), m.split_of(&r.image_id));
            assert_eq!(anns, &r.annotations);
        }
        let tax = ClassTaxonomy::cactus();
        assert!(
            validate_layout(dir.path(), LabelFormat::CornerPixel, &m, &tax)
                .unwrap()
                .is_empty()
        );

        fs::write(dir.path().join("labels/val/stray.txt"), "0 1 1 2 2\n").unwrap();
        fs::rename(
            dir.path().join("labels/train/c0_0000.txt"),
            dir.path().join("labels/test/c0_0000.txt"),
        )
        .unwrap();
        fs::write(dir.path().join("labels/val/c0_0001.txt"), "7 1 1 500 2\n").unwrap();
        let v = validate_layout(dir.path(), LabelFormat::CornerPixel, &m, &tax).unwrap();
        let got: Vec<(String, String)> = v
            .iter()
            .map(|v| (v.image_id.clone(), v.rule.to_string()))
            .collect();
        let want = [
            ("c0_0000", "label-mismatch"),
            ("c0_0001", "label-mismatch"),
            ("c0_0001", "unknown-class"),
            ("c0_0001", "out-of-bounds"),
            ("stray", "unlisted-image"),
        ];
        assert_eq!(
            got,
            want.map(|(a, b)| (a.to_string(), b.to_string())).to_vec()
        );
    }
}
