use std::collections::BTreeMap;

use cactuskit::annotations::{parse_label_file, serialize_label_file};
use cactuskit::dataset::{rotate_box, split_dataset};
use cactuskit::detector::{nms, PredictionSet};
use cactuskit::metrics::{
    coco_thresholds, counts_at, evaluate, evaluate_images, match_detections, pr_curve, EvalImage,
};
use cactuskit::trainlog::{export_series, parse_trainlog, Column, TrainLogRow};
use cactuskit::{
    iou, Annotation, BoundingBox, ClassTaxonomy, DatasetManifest, Detection, EvalConfig, ImageDims,
    ImageRecord, Interpolation, LabelFormat, SplitSpec,
};
use proptest::prelude::*;

const SIDE: u32 = 32;

fn arb_box(w: u32, h: u32) -> impl Strategy<Value = BoundingBox> {
    (0..w, 0..h, 1..=w, 1..=h).prop_map(move |(x, y, bw, bh)| {
        let x2 = (x + bw).min(w);
        let y2 = (y + bh).min(h);
        let x1 = x.min(x2 - 1);
        let y1 = y.min(y2 - 1);
        BoundingBox::new(x1.into(), y1.into(), x2.into(), y2.into()).unwrap()
    })
}

fn arb_gt() -> impl Strategy<Value = Vec<Annotation>> {
    prop::collection::vec((0u32..3, arb_box(SIDE, SIDE)), 0..=6)
        .prop_map(|v| v.into_iter().map(|(c, b)| Annotation::new(c, b)).collect())
}

fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
    // coarse confidences so ties are common
    prop::collection::vec((0u32..3, arb_box(SIDE, SIDE), 1u32..=10), 0..=8).prop_map(|v| {
        v.into_iter()
            .map(|(c, b, q)| Detection::new(c, b, f64::from(q) / 10.0).unwrap())
            .collect()
    })
}

fn arb_images() -> impl Strategy<Value = Vec<EvalImage>> {
    prop::collection::vec((arb_gt(), arb_dets()), 1..=6).prop_map(|scenes| {
        scenes
            .into_iter()
            .enumerate()
            .map(|(i, (ground_truth, detections))| EvalImage {
                image_id: format!("img{i}"),
                width: SIDE,
                height: SIDE,
                ground_truth,
                detections,
            })
            .collect()
    })
}

fn taxonomy3() -> ClassTaxonomy {
    ClassTaxonomy::from_toml_str(
        "[[class]]\nid = 0\nname = \"a\"\n[[class]]\nid = 1\nname = \"b\"\n[[class]]\nid = 2\nname = \"c\"\n",
    )
    .unwrap()
}

// Largest number of same-class pairs with IoU >= thr usable at once.
fn max_matching(gt: &[Annotation], dets: &[Detection], thr: f64) -> usize {
    fn go(
        i: usize,
        used: u32,
        gt: &[Annotation],
        dets: &[Detection],
        thr: f64,
        memo: &mut BTreeMap<(usize, u32), usize>,
    ) -> usize {
        if i == gt.len() {
            return 0;
        }
        if let Some(v) = memo.get(&(i, used)) {
            return *v;
        }
        let mut best = go(i + 1, used, gt, dets, thr, memo);
        for (j, d) in dets.iter().enumerate() {
            if used & (1 << j) == 0
                && d.class_id == gt[i].class_id
                && iou(&gt[i].bbox, &d.bbox) >= thr
            {
                best = best.max(1 + go(i + 1, used | (1 << j), gt, dets, thr, memo));
            }
        }
        memo.insert((i, used), best);
        best
    }
    go(0, 0, gt, dets, thr, &mut BTreeMap::new())
}

fn rotate_images(images: &[EvalImage]) -> Vec<EvalImage> {
    images
        .iter()
        .map(|im| {
            let dims = ImageDims::new(im.width, im.height).unwrap();
            let rot = |b: &BoundingBox| rotate_box(b, 90, dims).unwrap().0;
            EvalImage {
                image_id: im.image_id.clone(),
                width: im.height,
                height: im.width,
                ground_truth: im
                    .ground_truth
                    .iter()
                    .map(|a| Annotation::new(a.class_id, rot(&a.bbox)))
                    .collect(),
                detections: im
                    .detections
                    .iter()
                    .map(|d| d.with_box(rot(&d.bbox)))
                    .collect(),
            }
        })
        .collect()
}

fn scale_box(b: &BoundingBox, k: f64) -> BoundingBox {
    BoundingBox::new(b.x_min() * k, b.y_min() * k, b.x_max() * k, b.y_max() * k).unwrap()
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(64, 64), b in arb_box(64, 64)) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_is_translation_invariant(a in arb_box(64, 64), b in arb_box(64, 64), dx in -50i32..50, dy in -50i32..50) {
        let t = |x: &BoundingBox| {
            let (dx, dy) = (f64::from(dx) + 100.0, f64::from(dy) + 100.0);
            BoundingBox::new(x.x_min() + dx, x.y_min() + dy, x.x_max() + dx, x.y_max() + dy).unwrap()
        };
        prop_assert_eq!(iou(&a, &b), iou(&t(&a), &t(&b)));
    }

    #[test]
    fn label_text_round_trips(
        w in 1u32..4000,
        h in 1u32..4000,
        raw in prop::collection::vec((0u32..6, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20),
    ) {
        let dims = ImageDims::new(w, h).unwrap();
        let anns: Vec<Annotation> = raw
            .iter()
            .filter_map(|&(c, a, b, cc, d)| {
                let (x1, x2) = (a.min(cc) * f64::from(w), a.max(cc) * f64::from(w));
                let (y1, y2) = (b.min(d) * f64::from(h), b.max(d) * f64::from(h));
                BoundingBox::new(x1, y1, x2, y2).ok().map(|bb| Annotation::new(c, bb))
            })
            .collect();
        let norm = serialize_label_file(&anns, LabelFormat::NormalizedCenter, Some(dims)).unwrap();
        let back = parse_label_file(&norm, LabelFormat::NormalizedCenter, Some(dims)).unwrap();
        let corner = serialize_label_file(&back, LabelFormat::CornerPixel, None).unwrap();
        let again = parse_label_file(&corner, LabelFormat::CornerPixel, None).unwrap();
        prop_assert_eq!(again.len(), anns.len());
        for (x, y) in anns.iter().zip(&again) {
            prop_assert_eq!(x.class_id, y.class_id);
            for (p, q) in x.bbox.to_array().iter().zip(y.bbox.to_array()) {
                prop_assert!((p - q).abs() <= 1e-6, "{} vs {}", p, q);
            }
        }
    }

    #[test]
    fn rotation_preserves_area_and_bounds(w in 1u32..500, h in 1u32..500, fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.01f64..1.0, fh in 0.01f64..1.0) {
        let dims = ImageDims::new(w, h).unwrap();
        let x1 = (fx * f64::from(w) * 4.0).floor() / 4.0;
        let y1 = (fy * f64::from(h) * 4.0).floor() / 4.0;
        let x2 = (x1 + (fw * f64::from(w) * 4.0).ceil() / 4.0).min(f64::from(w));
        let y2 = (y1 + (fh * f64::from(h) * 4.0).ceil() / 4.0).min(f64::from(h));
        prop_assume!(x2 > x1 && y2 > y1);
        let b = BoundingBox::new(x1, y1, x2, y2).unwrap();
        let mut cur = (b, dims);
        for deg in [90, 180, 270] {
            let (r, d) = rotate_box(&b, deg, dims).unwrap();
            prop_assert_eq!(r.area(), b.area());
            prop_assert!(r.fits_within(d));
        }
        for _ in 0..4 {
            cur = rotate_box(&cur.0, 90, cur.1).unwrap();
        }
        prop_assert_eq!(cur, (b, dims));
    }

    #[test]
    fn nms_properties(dets in arb_dets(), thr in 0.05f64..=1.0, class_aware in any::<bool>()) {
        let once = nms(&dets, thr, class_aware).unwrap();
        prop_assert!(once.windows(2).all(|w| w[0].confidence() >= w[1].confidence()));
        prop_assert!(once.iter().all(|k| dets.contains(k)));
        prop_assert_eq!(nms(&once, thr, class_aware).unwrap(), once.clone());
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                if !class_aware || a.class_id == b.class_id {
                    prop_assert!(iou(&a.bbox, &b.bbox) < thr);
                }
            }
        }
    }

    #[test]
    fn ap_never_increases_with_threshold(images in arb_images()) {
        let report = evaluate_images(&images, &taxonomy3(), &EvalConfig::default());
        if let Ok(report) = report {
            for c in &report.per_class {
                for w in c.ap.windows(2) {
                    if let (Some(a), Some(b)) = (w[0], w[1]) {
                        prop_assert!(b <= a, "class {} ap {:?}", c.class_id, c.ap);
                    }
                }
            }
            let mean = report.per_threshold.iter().map(|t| t.map).sum::<f64>() / 10.0;
            prop_assert!((report.map50_95 - mean).abs() <= 1e-12);
            prop_assert_eq!(report.map50, report.per_threshold[0].map);
        }
    }

    #[test]
    fn rotating_a_dataset_changes_nothing(images in arb_images()) {
        let tax = taxonomy3();
        let a = evaluate_images(&images, &tax, &EvalConfig::default());
        let b = evaluate_images(&rotate_images(&images), &tax, &EvalConfig::default());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scaling_a_dataset_changes_nothing(images in arb_images()) {
        let tax = taxonomy3();
        let scaled: Vec<EvalImage> = images
            .iter()
            .map(|im| EvalImage {
                image_id: im.image_id.clone(),
                width: im.width * 4,
                height: im.height * 4,
                ground_truth: im.ground_truth.iter().map(|a| Annotation::new(a.class_id, scale_box(&a.bbox, 4.0))).collect(),
                detections: im.detections.iter().map(|d| d.with_box(scale_box(&d.bbox, 4.0))).collect(),
            })
            .collect();
        let a = evaluate_images(&images, &tax, &EvalConfig::default());
        let b = evaluate_images(&scaled, &tax, &EvalConfig::default());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pr_points_agree_with_confidence_sweep(images in arb_images(), class_id in 0u32..3) {
        let tax = taxonomy3();
        let curve = pr_curve(&images, class_id, 0.5).unwrap();
        for (k, p) in curve.points.iter().enumerate() {
            // only where the next point has a strictly lower confidence
            if curve.points.get(k + 1).is_some_and(|n| n.confidence == p.confidence) {
                continue;
            }
            let counts = counts_at(&images, &tax, 0.5, p.confidence).unwrap();
            let c = counts[class_id as usize];
            prop_assert_eq!(c.precision(), p.precision);
            if curve.gt_count > 0 {
                prop_assert_eq!(c.recall(), p.recall);
            }
        }
    }

    #[test]
    fn trainlog_export_parse_identity(
        raw in prop::collection::vec((0u32..10_000, [0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0], [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0]), 0..40)
    ) {
        let mut seen = std::collections::BTreeSet::new();
        let mut rows: Vec<TrainLogRow> = raw
            .into_iter()
            .filter(|(e, _, _)| seen.insert(*e))
            .map(|(epoch, l, m)| TrainLogRow {
                epoch,
                box_loss: l[0],
                obj_loss: l[1],
                cls_loss: l[2],
                precision: m[0],
                recall: m[1],
                map50: m[2],
                map50_95: m[3],
            })
            .collect();
        let all: Vec<&str> = Column::ALL.iter().map(|c| c.as_str()).collect();
        let back = parse_trainlog(&export_series(&rows, &all).unwrap()).unwrap();
        rows.sort_by_key(|r| r.epoch);
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn manifest_jsonl_identity(images in arb_images()) {
        let records: Vec<ImageRecord> = images
            .iter()
            .map(|im| ImageRecord::new(im.image_id.clone(), format!("images/{}.jpg", im.image_id), im.width, im.height, im.ground_truth.clone()))
            .collect();
        let m = DatasetManifest::from_records(records).unwrap();
        let split = split_dataset(&m, &SplitSpec::default(), &taxonomy3());
        for manifest in [Some(m), split.ok()].into_iter().flatten() {
            let text = manifest.to_jsonl();
            let back = DatasetManifest::from_jsonl(&text).unwrap();
            prop_assert_eq!(&back, &manifest);
            prop_assert_eq!(back.to_jsonl(), text);
        }
    }

    #[test]
    fn split_ignores_record_order(sizes in prop::collection::vec(2usize..40, 6), seed in any::<u64>(), rot in 0usize..200) {
        let mut records = Vec::new();
        for (c, n) in sizes.iter().enumerate() {
            for i in 0..*n {
                let b = BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
                records.push(ImageRecord::new(format!("c{c}_{i:03}"), "x.jpg", 10, 10, vec![Annotation::new(c as u32, b)]));
            }
        }
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let tax = ClassTaxonomy::cactus();
        let a = split_dataset(&DatasetManifest::from_records(records.clone()).unwrap(), &spec, &tax).unwrap();
        let k = rot % records.len();
        records.rotate_left(k);
        records.reverse();
        let b = split_dataset(&DatasetManifest::from_records(records).unwrap(), &spec, &tax).unwrap();
        prop_assert_eq!(a.assignments(), b.assignments());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn greedy_matching_against_exhaustive(gt in arb_gt(), dets in arb_dets(), t in 1u32..=19) {
        let thr = f64::from(t) / 20.0;
        let out = match_detections(&gt, &dets, thr).unwrap();
        let tp = out.matches.iter().filter(|m| m.is_tp()).count();
        let fp = out.matches.len() - tp;
        prop_assert!(tp <= max_matching(&gt, &dets, thr));
        prop_assert_eq!(tp + out.fn_count, gt.len());
        prop_assert_eq!(out.matches.len(), dets.len());
        // each ground truth claimed at most once, by a same-class detection above threshold
        let mut claimed = vec![false; gt.len()];
        for m in &out.matches {
            if let Some(j) = m.matched_gt {
                prop_assert!(!claimed[j]);
                claimed[j] = true;
                prop_assert_eq!(gt[j].class_id, m.class_id);
                prop_assert!(iou(&gt[j].bbox, &dets[m.detection].bbox) >= thr);
            }
        }
        prop_assert!(out.matches.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if gt.is_empty() { 1.0 } else { tp as f64 / gt.len() as f64 };
        let counts = cactuskit::metrics::ClassCounts { class_id: 0, tp, fp, fn_: out.fn_count, tn_images: 0 };
        prop_assert_eq!(counts.precision(), precision);
        prop_assert_eq!(counts.recall(), recall);
    }
}

#[test]
fn coco_thresholds_are_the_ten_steps() {
    let t = coco_thresholds();
    let expected = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
    assert_eq!(t, expected);
}

#[test]
fn identity_and_empty_predictions() {
    let tax = ClassTaxonomy::cactus();
    let records: Vec<ImageRecord> = (0..12u32)
        .map(|i| {
            let b = BoundingBox::new(f64::from(i), 2.0, f64::from(i) + 30.0, 40.0).unwrap();
            ImageRecord::new(
                format!("im{i:02}"),
                "x.jpg",
                64,
                64,
                vec![Annotation::new(i % 6, b)],
            )
        })
        .collect();
    let m = DatasetManifest::from_records(records).unwrap();
    let r = evaluate(
        &m,
        &PredictionSet::from_ground_truth(&m),
        &tax,
        &EvalConfig::default(),
    )
    .unwrap();
    assert_eq!(
        (r.precision, r.recall, r.map50, r.map50_95),
        (1.0, 1.0, 1.0, 1.0)
    );
    let r = evaluate(
        &m,
        &PredictionSet::new("none"),
        &tax,
        &EvalConfig::default(),
    )
    .unwrap();
    assert_eq!((r.recall, r.map50, r.map50_95), (0.0, 0.0, 0.0));
    assert_eq!(r.precision, 1.0);
    for interp in [Interpolation::AllPoint, Interpolation::Point101] {
        let cfg = EvalConfig {
            interpolation: interp,
            ..EvalConfig::default()
        };
        let r = evaluate(&m, &PredictionSet::from_ground_truth(&m), &tax, &cfg).unwrap();
        assert_eq!(r.map50_95, 1.0);
    }
}
