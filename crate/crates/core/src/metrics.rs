//! Detection evaluation: IoU matching, precision/recall, PR curves, AP,
//! mAP@.5, mAP@.5:.95 and confusion matrices.
//!
//! Conventions:
//! - Matching for counts, PR curves and AP is class-aware. The confusion
//!   matrix matches class-agnostically so that misclassifications show up
//!   off the diagonal.
//! - Precision with no predictions and recall with no ground truth are 1.0.
//! - Classes without ground truth are left out of mAP means.
//! - A true negative is counted per image and class: the image has neither a
//!   ground truth nor a detection (at the confidence threshold) of the class.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{iou, Annotation, ClassTaxonomy, Detection};
use crate::dataset::DatasetManifest;
use crate::detector::PredictionSet;
use crate::par::{self, Execution};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("mAP is undefined: no class has any ground truth")]
    NoGroundTruth,
    #[error("predictions reference image(s) not in the dataset: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
}

fn check_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidThreshold(t))
    }
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Outcome for one detection, in processing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMatch {
    /// Index into the detection list passed in.
    pub detection: usize,
    pub class_id: u32,
    pub confidence: f64,
    /// Ground-truth index this detection claimed, if it is a true positive.
    pub matched_gt: Option<usize>,
}

impl DetectionMatch {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Sorted by descending confidence, ties in input order.
    pub matches: Vec<DetectionMatch>,
    pub fn_count: usize,
    pub gt_count: usize,
}

impl MatchOutcome {
    pub fn tp_count(&self) -> usize {
        self.matches.iter().filter(|m| m.is_tp()).count()
    }

    pub fn fp_count(&self) -> usize {
        self.matches.len() - self.tp_count()
    }
}

fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal confidences keep input order
    order.sort_by(|&a, &b| dets[b].confidence().total_cmp(&dets[a].confidence()));
    order
}

fn greedy_match(
    gt: &[Annotation],
    dets: &[Detection],
    iou_threshold: f64,
    class_aware: bool,
) -> MatchOutcome {
    let mut taken = vec![false; gt.len()];
    let mut matches = Vec::with_capacity(dets.len());
    for i in confidence_order(dets) {
        let det = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] || (class_aware && g.class_id != det.class_id) {
                continue;
            }
            let overlap = iou(&g.bbox, &det.bbox);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((j, overlap));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        matches.push(DetectionMatch {
            detection: i,
            class_id: det.class_id,
            confidence: det.confidence(),
            matched_gt: best.map(|(j, _)| j),
        });
    }
    MatchOutcome {
        fn_count: taken.iter().filter(|t| !**t).count(),
        gt_count: gt.len(),
        matches,
    }
}

/// Greedy class-aware matching of one image's detections to its ground
/// truth. Each detection, highest confidence first, claims the unmatched
/// same-class ground truth with the highest IoU at or above the threshold
/// (lowest index on ties).
pub fn match_detections(
    ground_truth: &[Annotation],
    detections: &[Detection],
    iou_threshold: f64,
) -> Result<MatchOutcome, MetricsError> {
    check_threshold(iou_threshold)?;
    Ok(greedy_match(ground_truth, detections, iou_threshold, true))
}

/// TP/FP/FN for one class, plus image-level true negatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class_id: u32,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn_images: usize,
}

impl ClassCounts {
    /// Number of predictions made: `tp + fp`.
    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    pub fn precision(&self) -> f64 {
        precision(self)
    }

    pub fn recall(&self) -> f64 {
        recall(self)
    }
}

/// `tp / (tp + fp)`, or 1.0 when nothing was predicted.
pub fn precision(counts: &ClassCounts) -> f64 {
    let n = counts.tp + counts.fp;
    if n == 0 {
        1.0
    } else {
        counts.tp as f64 / n as f64
    }
}

/// `tp / (tp + fn)`, or 1.0 when there was nothing to find.
pub fn recall(counts: &ClassCounts) -> f64 {
    let n = counts.tp + counts.fn_;
    if n == 0 {
        1.0
    } else {
        counts.tp as f64 / n as f64
    }
}

/// Ground truth and predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub ground_truth: Vec<Annotation>,
    pub detections: Vec<Detection>,
}

/// Pairs every manifest record with its predictions, sorted by image id.
pub fn build_images(
    manifest: &DatasetManifest,
    predictions: &PredictionSet,
) -> Result<Vec<EvalImage>, MetricsError> {
    let unknown: Vec<String> = predictions
        .detections
        .keys()
        .filter(|id| manifest.get(id).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(MetricsError::UnknownImages(unknown));
    }
    Ok(manifest
        .sorted_records(None)
        .into_iter()
        .map(|r| EvalImage {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            ground_truth: r.annotations.clone(),
            detections: predictions
                .detections
                .get(&r.image_id)
                .cloned()
                .unwrap_or_default(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Confidence of the detection that produced this point.
    pub confidence: f64,
}

/// Precision/recall after each detection of one class, swept by descending
/// confidence over the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: u32,
    pub iou_threshold: f64,
    pub gt_count: usize,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    /// Area under the precision envelope.
    #[default]
    #[serde(rename = "all_point")]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.01, ..., 1.
    #[serde(rename = "101_point")]
    Point101,
}

impl FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_point" | "all-point" => Ok(Interpolation::AllPoint),
            "101_point" | "101-point" => Ok(Interpolation::Point101),
            other => Err(format!(
                "unknown interpolation {other:?} (expected all_point or 101_point)"
            )),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::AllPoint => "all_point",
            Interpolation::Point101 => "101_point",
        })
    }
}

// One image's class-aware matches at one threshold.
struct ImageOutcome<'a> {
    image: &'a EvalImage,
    outcome: MatchOutcome,
}

fn match_all<'a>(
    images: &'a [EvalImage],
    iou_threshold: f64,
    exec: Execution,
) -> Vec<ImageOutcome<'a>> {
    let refs: Vec<&'a EvalImage> = images.iter().collect();
    par::map(exec, &refs, |&image| ImageOutcome {
        image,
        outcome: greedy_match(&image.ground_truth, &image.detections, iou_threshold, true),
    })
}

// PR curves of classes 0..num_classes in one pass over the outcomes.
fn curves_from_outcomes(
    outcomes: &[ImageOutcome<'_>],
    num_classes: usize,
    iou_threshold: f64,
) -> Vec<PrCurve> {
    let mut gt_counts = vec![0usize; num_classes];
    // per class: (confidence, image id, position within image, tp)
    let mut pooled: Vec<Vec<(f64, &str, usize, bool)>> = vec![Vec::new(); num_classes];
    for o in outcomes {
        for g in &o.image.ground_truth {
            if let Some(n) = gt_counts.get_mut(g.class_id as usize) {
                *n += 1;
            }
        }
        for (pos, m) in o.outcome.matches.iter().enumerate() {
            if let Some(list) = pooled.get_mut(m.class_id as usize) {
                list.push((m.confidence, o.image.image_id.as_str(), pos, m.is_tp()));
            }
        }
    }
    pooled
        .into_iter()
        .zip(gt_counts)
        .enumerate()
        .map(|(class, (mut list, gt_count))| {
            list.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| a.1.cmp(b.1))
                    .then_with(|| a.2.cmp(&b.2))
            });
            let mut tp = 0usize;
            let points = list
                .iter()
                .enumerate()
                .map(|(k, &(confidence, _, _, is_tp))| {
                    tp += usize::from(is_tp);
                    PrPoint {
                        recall: if gt_count == 0 {
                            0.0
                        } else {
                            tp as f64 / gt_count as f64
                        },
                        precision: tp as f64 / (k + 1) as f64,
                        confidence,
                    }
                })
                .collect();
            PrCurve {
                class_id: class as u32,
                iou_threshold,
                gt_count,
                points,
            }
        })
        .collect()
}

/// PR curve of one class over a set of images.
pub fn pr_curve(
    images: &[EvalImage],
    class_id: u32,
    iou_threshold: f64,
) -> Result<PrCurve, MetricsError> {
    check_threshold(iou_threshold)?;
    let outcomes = match_all(images, iou_threshold, Execution::Auto);
    let mut curves = curves_from_outcomes(&outcomes, class_id as usize + 1, iou_threshold);
    Ok(curves.pop().expect("at least one curve"))
}

/// AP of a curve; `None` when the class has no ground truth.
pub fn average_precision(curve: &PrCurve, interpolation: Interpolation) -> Option<f64> {
    if curve.gt_count == 0 {
        return None;
    }
    if curve.points.is_empty() {
        return Some(0.0);
    }
    // envelope[i] = max precision at any point from i onwards
    let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let ap = match interpolation {
        Interpolation::AllPoint => {
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (p, env) in curve.points.iter().zip(&envelope) {
                area += (p.recall - prev_recall) * env;
                prev_recall = p.recall;
            }
            area
        }
        Interpolation::Point101 => {
            let mut sum = 0.0;
            let mut idx = 0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                while idx < curve.points.len() && curve.points[idx].recall < r {
                    idx += 1;
                }
                if idx < curve.points.len() {
                    sum += envelope[idx];
                }
            }
            sum / 101.0
        }
    };
    Some(ap)
}

/// mAP at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub iou_threshold: f64,
    pub map: f64,
    /// AP per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

fn map_from_outcomes(
    outcomes: &[ImageOutcome<'_>],
    taxonomy: &ClassTaxonomy,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<MapResult, MetricsError> {
    let per_class: Vec<Option<f64>> = curves_from_outcomes(outcomes, taxonomy.len(), iou_threshold)
        .iter()
        .map(|c| average_precision(c, interpolation))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    Ok(MapResult {
        iou_threshold,
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Mean AP over classes with ground truth, at one IoU threshold.
pub fn map_at(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<MapResult, MetricsError> {
    check_threshold(iou_threshold)?;
    let outcomes = match_all(images, iou_threshold, Execution::Auto);
    map_from_outcomes(&outcomes, taxonomy, iou_threshold, interpolation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRange {
    pub map50_95: f64,
    pub per_threshold: Vec<MapResult>,
}

fn map_range_with(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    interpolation: Interpolation,
    exec: Execution,
) -> Result<MapRange, MetricsError> {
    let per_threshold = par::try_map(exec, &coco_thresholds(), |&t| {
        let outcomes = match_all(images, t, exec);
        map_from_outcomes(&outcomes, taxonomy, t, interpolation)
    })?;
    let map50_95 = per_threshold.iter().map(|m| m.map).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapRange {
        map50_95,
        per_threshold,
    })
}

/// mAP at each of 0.50:0.05:0.95 and their mean.
pub fn map_range(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    interpolation: Interpolation,
) -> Result<MapRange, MetricsError> {
    map_range_with(images, taxonomy, interpolation, Execution::Auto)
}

/// Counts at an operating point: detections below `confidence_threshold`
/// are dropped before matching.
pub fn counts_at(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    iou_threshold: f64,
    confidence_threshold: f64,
) -> Result<Vec<ClassCounts>, MetricsError> {
    check_threshold(iou_threshold)?;
    check_threshold(confidence_threshold)?;
    Ok(counts_with(
        images,
        taxonomy,
        iou_threshold,
        confidence_threshold,
        Execution::Auto,
    ))
}

fn counts_with(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    iou_threshold: f64,
    confidence_threshold: f64,
    exec: Execution,
) -> Vec<ClassCounts> {
    let k = taxonomy.len();
    let per_image = par::map(exec, images, |image| {
        let kept: Vec<Detection> = image
            .detections
            .iter()
            .filter(|d| d.confidence() >= confidence_threshold)
            .copied()
            .collect();
        let outcome = greedy_match(&image.ground_truth, &kept, iou_threshold, true);
        let mut counts = vec![ClassCounts::default(); k];
        for m in &outcome.matches {
            if let Some(c) = counts.get_mut(m.class_id as usize) {
                if m.is_tp() {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
        }
        let mut has_gt = vec![false; k];
        for (j, g) in image.ground_truth.iter().enumerate() {
            let Some(slot) = has_gt.get_mut(g.class_id as usize) else {
                continue;
            };
            *slot = true;
            if !outcome.matches.iter().any(|m| m.matched_gt == Some(j)) {
                counts[g.class_id as usize].fn_ += 1;
            }
        }
        for (c, count) in counts.iter_mut().enumerate() {
            let predicted = kept.iter().any(|d| d.class_id as usize == c);
            if !has_gt[c] && !predicted {
                count.tn_images += 1;
            }
        }
        counts
    });
    let mut total: Vec<ClassCounts> = taxonomy
        .ids()
        .map(|class_id| ClassCounts {
            class_id,
            ..ClassCounts::default()
        })
        .collect();
    for counts in per_image {
        for (t, c) in total.iter_mut().zip(counts) {
            t.tp += c.tp;
            t.fp += c.fp;
            t.fn_ += c.fn_;
            t.tn_images += c.tn_images;
        }
    }
    total
}

/// True-class x predicted-class counts with a missed column (ground truth
/// nobody matched) and a ghost row (detections that matched nothing).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    /// `cells[true][predicted]`.
    pub cells: Vec<Vec<usize>>,
    pub missed: Vec<usize>,
    pub ghost: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn ground_truth_count(&self, class_id: usize) -> usize {
        self.cells[class_id].iter().sum::<usize>() + self.missed[class_id]
    }

    pub fn render_text(&self) -> String {
        let mut header = vec!["true \\ predicted".to_string()];
        header.extend(self.class_names.iter().cloned());
        header.push("missed".into());
        let mut table = vec![header];
        for (i, name) in self.class_names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(self.cells[i].iter().map(|c| c.to_string()));
            row.push(self.missed[i].to_string());
            table.push(row);
        }
        let mut ghost = vec!["ghost".to_string()];
        ghost.extend(self.ghost.iter().map(|c| c.to_string()));
        ghost.push(String::new());
        table.push(ghost);
        crate::report::align_table(&table)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true_class");
        for n in &self.class_names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",missed\n");
        for (i, name) in self.class_names.iter().enumerate() {
            out.push_str(name);
            for c in &self.cells[i] {
                out.push_str(&format!(",{c}"));
            }
            out.push_str(&format!(",{}\n", self.missed[i]));
        }
        out.push_str("ghost");
        for c in &self.ghost {
            out.push_str(&format!(",{c}"));
        }
        out.push_str(",\n");
        out
    }
}

pub fn confusion_matrix(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    iou_threshold: f64,
    confidence_threshold: f64,
) -> Result<ConfusionMatrix, MetricsError> {
    check_threshold(iou_threshold)?;
    check_threshold(confidence_threshold)?;
    Ok(confusion_with(
        images,
        taxonomy,
        iou_threshold,
        confidence_threshold,
        Execution::Auto,
    ))
}

fn confusion_with(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    iou_threshold: f64,
    confidence_threshold: f64,
    exec: Execution,
) -> ConfusionMatrix {
    let k = taxonomy.len();
    let per_image = par::map(exec, images, |image| {
        let kept: Vec<Detection> = image
            .detections
            .iter()
            .filter(|d| d.confidence() >= confidence_threshold)
            .copied()
            .collect();
        let outcome = greedy_match(&image.ground_truth, &kept, iou_threshold, false);
        let mut pairs = Vec::new();
        let mut ghosts = Vec::new();
        let mut matched = vec![false; image.ground_truth.len()];
        for m in &outcome.matches {
            match m.matched_gt {
                Some(j) => {
                    matched[j] = true;
                    pairs.push((image.ground_truth[j].class_id, m.class_id));
                }
                None => ghosts.push(m.class_id),
            }
        }
        let missed: Vec<u32> = image
            .ground_truth
            .iter()
            .zip(&matched)
            .filter(|(_, m)| !**m)
            .map(|(g, _)| g.class_id)
            .collect();
        (pairs, ghosts, missed)
    });
    let mut cm = ConfusionMatrix {
        class_names: taxonomy.classes().iter().map(|c| c.name.clone()).collect(),
        cells: vec![vec![0; k]; k],
        missed: vec![0; k],
        ghost: vec![0; k],
    };
    let in_range = |c: u32| (c as usize) < k;
    for (pairs, ghosts, missed) in per_image {
        for (g, p) in pairs {
            if in_range(g) && in_range(p) {
                cm.cells[g as usize][p as usize] += 1;
            }
        }
        for p in ghosts.into_iter().filter(|c| in_range(*c)) {
            cm.ghost[p as usize] += 1;
        }
        for g in missed.into_iter().filter(|c| in_range(*c)) {
            cm.missed[g as usize] += 1;
        }
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// IoU threshold of the operating point (counts and confusion matrix).
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    pub interpolation: Interpolation,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            confidence_threshold: 0.5,
            interpolation: Interpolation::AllPoint,
            exec: Execution::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub name: String,
    pub ground_truth: usize,
    pub detections: usize,
    pub counts: ClassCounts,
    pub precision: f64,
    pub recall: f64,
    /// AP at each threshold of [`coco_thresholds`].
    pub ap: Vec<Option<f64>>,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub iou_threshold: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub images: usize,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub per_threshold: Vec<ThresholdMap>,
    pub per_class: Vec<ClassReport>,
    pub confusion: ConfusionMatrix,
}

/// Evaluates predictions against a manifest's ground truth.
pub fn evaluate(
    manifest: &DatasetManifest,
    predictions: &PredictionSet,
    taxonomy: &ClassTaxonomy,
    config: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    let images = build_images(manifest, predictions)?;
    evaluate_images(&images, taxonomy, config)
}

/// [`evaluate`] over already-paired images.
pub fn evaluate_images(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    config: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    check_threshold(config.iou_threshold)?;
    check_threshold(config.confidence_threshold)?;
    let range = map_range_with(images, taxonomy, config.interpolation, config.exec)?;
    let counts = counts_with(
        images,
        taxonomy,
        config.iou_threshold,
        config.confidence_threshold,
        config.exec,
    );
    let confusion = confusion_with(
        images,
        taxonomy,
        config.iou_threshold,
        config.confidence_threshold,
        config.exec,
    );

    let mut gt_per_class: BTreeMap<u32, usize> = BTreeMap::new();
    let mut det_per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for image in images {
        for g in &image.ground_truth {
            *gt_per_class.entry(g.class_id).or_default() += 1;
        }
        for d in &image.detections {
            *det_per_class.entry(d.class_id).or_default() += 1;
        }
    }

    let per_class: Vec<ClassReport> = taxonomy
        .classes()
        .iter()
        .zip(&counts)
        .map(|(class, c)| {
            let idx = class.id as usize;
            let ap: Vec<Option<f64>> = range
                .per_threshold
                .iter()
                .map(|m| m.per_class[idx])
                .collect();
            let ap50_95 = if ap.iter().all(Option::is_some) {
                Some(ap.iter().flatten().sum::<f64>() / ap.len() as f64)
            } else {
                None
            };
            ClassReport {
                class_id: class.id,
                name: class.name.clone(),
                ground_truth: gt_per_class.get(&class.id).copied().unwrap_or(0),
                detections: det_per_class.get(&class.id).copied().unwrap_or(0),
                counts: *c,
                precision: precision(c),
                recall: recall(c),
                ap50: ap[0],
                ap,
                ap50_95,
            }
        })
        .collect();

    let total = counts
        .iter()
        .fold(ClassCounts::default(), |acc, c| ClassCounts {
            class_id: 0,
            tp: acc.tp + c.tp,
            fp: acc.fp + c.fp,
            fn_: acc.fn_ + c.fn_,
            tn_images: acc.tn_images + c.tn_images,
        });

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: *config,
        images: images.len(),
        precision: precision(&total),
        recall: recall(&total),
        map50: range.per_threshold[0].map,
        map50_95: range.map50_95,
        per_threshold: range
            .per_threshold
            .iter()
            .map(|m| ThresholdMap {
                iou_threshold: m.iou_threshold,
                map: m.map,
            })
            .collect(),
        per_class,
        confusion,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One row per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "class_id,name,ground_truth,detections,tp,fp,fn,tn_images,precision,recall,ap50,ap50_95\n",
        );
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.class_id,
                c.name,
                c.ground_truth,
                c.detections,
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_,
                c.counts.tn_images,
                c.precision,
                c.recall,
                opt(c.ap50),
                opt(c.ap50_95)
            ));
        }
        out
    }
}
