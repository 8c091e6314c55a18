use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use cactuskit::annotations::{parse_label_file, serialize_label_file, ImageDims};
use cactuskit::bench::{entries_from_toml, measure, ComparisonEntry, LatencyReport};
use cactuskit::dataset::{
    augment_rotations, materialize_layout, split_dataset, stats, validate_layout,
    validate_manifest, LayoutOptions, DESCRIPTION_FILE,
};
use cactuskit::detector::{
    load_predictions, nms, run_detector, DelayBackend, DetectorBackend, ExternalProcessBackend,
    FileReplayBackend, OracleBackend, OracleConfig, PredictionSet,
};
use cactuskit::metrics::{build_images, confusion_matrix, evaluate, MetricsError};
use cactuskit::report::{generate_report, render_eval, ReportFormat};
use cactuskit::trainlog::{
    export_series, parse_trainlog_with, summarize, Column, ColumnAliases, Criterion,
    TrainLogSummary,
};
use cactuskit::{DatasetManifest, EvalReport, SplitSpec};

use crate::config::{input, usage, FileConfig, GlobalOverrides, RunConfig};
use crate::output::Outputs;
use crate::{
    AugmentArgs, BackendArgs, BackendKind, BenchArgs, Cli, Command, ConvertArgs, EvalArgs,
    ExportArgs, LogArgs, MaterializeArgs, PredictArgs, ReportArgs, SplitArgs, TrainlogCommand,
    ValidateArgs,
};

pub enum Status {
    Ok,
    /// The command ran but found problems in its input.
    Failed,
}

pub fn run(cli: Cli) -> Result<Status> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let cfg = RunConfig::resolve(
        file,
        GlobalOverrides {
            seed: cli.seed,
            out_dir: cli.out_dir,
            taxonomy: cli.taxonomy,
            sequential: cli.sequential,
        },
    )?;
    match cli.command {
        Command::Validate(a) => validate(cfg, a),
        Command::Split(a) => split(cfg, a),
        Command::Augment(a) => augment(cfg, a),
        Command::Materialize(a) => materialize(cfg, a),
        Command::Convert(a) => convert(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Confusion(a) => confusion(cfg, a),
        Command::Trainlog { action } => match action {
            TrainlogCommand::Parse(a) => trainlog_parse(cfg, a),
            TrainlogCommand::Summarize(a) => trainlog_summarize(cfg, a),
            TrainlogCommand::Export(a) => trainlog_export(cfg, a),
        },
        Command::Bench(a) => bench(cfg, a),
        Command::Predict(a) => predict(cfg, a),
        Command::Report(a) => report(cfg, a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(path).with_context(|| format!("manifest {}", path.display()))
}

fn validate(mut cfg: RunConfig, a: ValidateArgs) -> Result<Status> {
    let manifest_path = input(&a.manifest)?;
    let labels = a.labels.as_deref().map(input).transpose()?;
    if let Some(f) = a.format {
        cfg.label_format = f;
    }
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.input(&manifest_path)?;

    let text = read_text(&manifest_path)?;
    let mut violations = validate_manifest(&text, &cfg.classes)
        .with_context(|| format!("manifest {}", manifest_path.display()))?;
    if let Some(root) = &labels {
        out.input(root)?;
        let manifest = DatasetManifest::from_jsonl(&text)
            .context("labels can only be checked against a well-formed manifest")?;
        violations.extend(validate_layout(
            root,
            cfg.label_format,
            &manifest,
            &cfg.classes,
        )?);
    }

    let listing: String = violations.iter().map(|v| format!("{v}\n")).collect();
    out.write("violations.txt", &listing)?;
    out.write(
        "violations.json",
        &(serde_json::to_string_pretty(&violations)? + "\n"),
    )?;
    print!("{listing}");
    eprintln!("{} violation(s)", violations.len());
    out.finish("validate", &cfg, &a)?;
    Ok(if violations.is_empty() {
        Status::Ok
    } else {
        Status::Failed
    })
}

fn split(mut cfg: RunConfig, a: SplitArgs) -> Result<Status> {
    let manifest_path = input(&a.manifest)?;
    let spec = SplitSpec {
        train_frac: a.train.unwrap_or(cfg.split.train_frac),
        val_frac: a.val.unwrap_or(cfg.split.val_frac),
        test_frac: a.test.unwrap_or(cfg.split.test_frac),
        seed: cfg.seed,
        group_augmented: a.group_augmented || cfg.split.group_augmented,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    cfg.split = spec;
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.input(&manifest_path)?;

    let manifest = load_manifest(&manifest_path)?;
    let assigned = split_dataset(&manifest, &spec, &cfg.classes)?;
    let table = stats(&assigned, &cfg.classes);
    out.write("split.jsonl", &assigned.to_jsonl())?;
    out.write("split_stats.txt", &table.render_text())?;
    out.write("split_stats.csv", &table.to_csv())?;
    print!("{}", table.render_text());
    out.finish("split", &cfg, &a)?;
    Ok(Status::Ok)
}

fn augment(cfg: RunConfig, a: AugmentArgs) -> Result<Status> {
    let manifest_path = input(&a.manifest)?;
    if let Some(bad) = a.angles.iter().find(|d| !matches!(d, 90 | 180 | 270)) {
        return Err(usage(format!("angles must be 90, 180 or 270, got {bad}")));
    }
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.input(&manifest_path)?;

    let manifest = load_manifest(&manifest_path)?;
    let expanded = augment_rotations(&manifest, &a.angles)?;
    out.write("augmented.jsonl", &expanded.to_jsonl())?;
    println!("{} records -> {} records", manifest.len(), expanded.len());
    out.finish("augment", &cfg, &a)?;
    Ok(Status::Ok)
}

fn materialize(mut cfg: RunConfig, a: MaterializeArgs) -> Result<Status> {
    let manifest_path = input(&a.manifest)?;
    let images = a.images.as_deref().map(input).transpose()?;
    if let Some(f) = a.format {
        cfg.label_format = f;
    }
    if a.name.is_empty() || Path::new(&a.name).components().count() != 1 {
        return Err(usage(format!(
            "--name must be a single path component, got {:?}",
            a.name
        )));
    }
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.input(&manifest_path)?;
    if let Some(dir) = &images {
        out.input(dir)?;
    }

    let manifest = load_manifest(&manifest_path)?;
    let root = out.dir().join(&a.name);
    let options = LayoutOptions {
        format: cfg.label_format,
        image_source: images,
        exec: cfg.eval.exec,
    };
    let summary = materialize_layout(&manifest, &cfg.classes, &root, &options)?;
    out.record_existing(&format!("{}/{DESCRIPTION_FILE}", a.name))?;
    for split in cactuskit::Split::ALL {
        for r in manifest.sorted_records(Some(split)) {
            out.record_existing(&format!("{}/labels/{split}/{}.txt", a.name, r.image_id))?;
        }
    }
    out.write(
        "materialize_summary.json",
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    println!(
        "{} label files ({} train, {} val, {} test), {} images copied, {} missing",
        summary.label_files,
        summary
            .per_split
            .get(&cactuskit::Split::Train)
            .unwrap_or(&0),
        summary.per_split.get(&cactuskit::Split::Val).unwrap_or(&0),
        summary.per_split.get(&cactuskit::Split::Test).unwrap_or(&0),
        summary.images_copied,
        summary.missing_images.len()
    );
    out.finish("materialize", &cfg, &a)?;
    Ok(Status::Ok)
}

fn label_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("cannot list {}", path.display()))? {
        let p = entry?.path();
        if p.is_file() && p.extension().and_then(|e| e.to_str()) == Some("txt") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn convert(cfg: RunConfig, a: ConvertArgs) -> Result<Status> {
    let source = input(&a.input)?;
    let manifest_path = a.manifest.as_deref().map(input).transpose()?;
    let fixed_dims = match (a.width, a.height) {
        (Some(w), Some(h)) => Some(ImageDims::new(w, h).map_err(|e| usage(e.to_string()))?),
        _ => None,
    };
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.input(&source)?;
    let manifest = match &manifest_path {
        Some(p) => {
            out.input(p)?;
            Some(load_manifest(p)?)
        }
        None => None,
    };

    let files = label_files(&source)?;
    for file in &files {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let dims = match (&manifest, fixed_dims) {
            (_, Some(d)) => Some(d),
            (Some(m), None) => {
                let record = m.get(stem).ok_or_else(|| {
                    anyhow!("{}: image {stem:?} is not in the manifest", file.display())
                })?;
                Some(record.dims()?)
            }
            (None, None) => None,
        };
        let text = read_text(file)?;
        let anns =
            parse_label_file(&text, a.from, dims).with_context(|| format!("{}", file.display()))?;
        let converted = serialize_label_file(&anns, a.to, dims)
            .with_context(|| format!("{}", file.display()))?;
        let name = file.file_name().and_then(|n| n.to_str()).unwrap_or(stem);
        out.write(&format!("converted/{name}"), &converted)?;
    }
    println!(
        "converted {} label file(s) from {} to {}",
        files.len(),
        a.from,
        a.to
    );
    out.finish("convert", &cfg, &a)?;
    Ok(Status::Ok)
}

/// Shared front half of `eval` and `confusion`.
fn eval_inputs(
    cfg: &mut RunConfig,
    a: &EvalArgs,
    out: &mut Outputs,
) -> Result<(DatasetManifest, PredictionSet)> {
    let manifest_path = input(&a.manifest)?;
    let predictions_path = a.predictions.as_deref().map(input).transpose()?;
    if let Some(v) = a.iou {
        if !(v > 0.0 && v <= 1.0) {
            return Err(usage(format!("--iou must be within (0, 1], got {v}")));
        }
        cfg.eval.iou_threshold = v;
    }
    if let Some(v) = a.confidence {
        if !(v > 0.0 && v <= 1.0) {
            return Err(usage(format!(
                "--confidence must be within (0, 1], got {v}"
            )));
        }
        cfg.eval.confidence_threshold = v;
    }
    if let Some(v) = a.interpolation {
        cfg.eval.interpolation = v;
    }
    out.input(&manifest_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let mut predictions = match &predictions_path {
        Some(p) => {
            out.input(p)?;
            load_predictions(p, &manifest)?
        }
        None => PredictionSet::from_ground_truth(&manifest),
    };
    let manifest = match a.split {
        Some(s) => {
            let subset = manifest.filter_split(s);
            predictions
                .detections
                .retain(|id, _| subset.get(id).is_some());
            subset
        }
        None => manifest,
    };
    Ok((manifest, predictions))
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<Status> {
    let mut out = Outputs::create(&cfg.out_dir)?;
    let (manifest, predictions) = eval_inputs(&mut cfg, &a, &mut out)?;
    let report = match evaluate(&manifest, &predictions, &cfg.classes, &cfg.eval) {
        Err(MetricsError::NoGroundTruth) => {
            eprintln!("error: no ground-truth objects to evaluate against; metrics are undefined");
            return Ok(Status::Failed);
        }
        other => other?,
    };
    let text = render_eval(&report);
    out.write("eval.json", &report.to_json())?;
    out.write("eval.csv", &report.to_csv())?;
    out.write("eval.txt", &text)?;
    print!("{text}");
    out.finish("eval", &cfg, &a)?;
    Ok(Status::Ok)
}

fn confusion(mut cfg: RunConfig, a: EvalArgs) -> Result<Status> {
    let mut out = Outputs::create(&cfg.out_dir)?;
    let (manifest, predictions) = eval_inputs(&mut cfg, &a, &mut out)?;
    let images = build_images(&manifest, &predictions)?;
    let cm = confusion_matrix(
        &images,
        &cfg.classes,
        cfg.eval.iou_threshold,
        cfg.eval.confidence_threshold,
    )?;
    out.write("confusion.txt", &cm.render_text())?;
    out.write("confusion.csv", &cm.to_csv())?;
    print!("{}", cm.render_text());
    out.finish("confusion", &cfg, &a)?;
    Ok(Status::Ok)
}

fn read_log(a: &LogArgs, out: &mut Outputs) -> Result<Vec<cactuskit::trainlog::TrainLogRow>> {
    let log = input(&a.log)?;
    let aliases_path = a.aliases.as_deref().map(input).transpose()?;
    let mut aliases = ColumnAliases::default();
    if let Some(p) = &aliases_path {
        out.input(p)?;
        aliases
            .extend_from_text(&read_text(p)?)
            .map_err(|e| usage(format!("aliases {}: {e}", p.display())))?;
    }
    out.input(&log)?;
    let rows = parse_trainlog_with(&read_text(&log)?, &aliases)
        .with_context(|| format!("training log {}", log.display()))?;
    Ok(rows)
}

fn trainlog_parse(cfg: RunConfig, a: LogArgs) -> Result<Status> {
    let mut out = Outputs::create(&cfg.out_dir)?;
    let rows = read_log(&a, &mut out)?;
    out.write(
        "trainlog_rows.json",
        &(serde_json::to_string_pretty(&rows)? + "\n"),
    )?;
    println!("{} epoch rows", rows.len());
    out.finish("trainlog-parse", &cfg, &a)?;
    Ok(Status::Ok)
}

fn summary_text(s: &TrainLogSummary) -> String {
    let mut text = format!("epochs logged: {}\n", s.row_count);
    for c in Criterion::ALL {
        let row = s.best(c);
        text.push_str(&format!(
            "best {}: {} at epoch {}\n",
            c.column().as_str(),
            row.get(c.column()),
            row.epoch
        ));
    }
    text.push_str(&format!(
        "final epoch {}: total loss {}\n",
        s.final_row.epoch,
        s.final_row.total_loss()
    ));
    text
}

fn trainlog_summarize(cfg: RunConfig, a: LogArgs) -> Result<Status> {
    let mut out = Outputs::create(&cfg.out_dir)?;
    let rows = read_log(&a, &mut out)?;
    let summary = summarize(&rows)?;
    let text = summary_text(&summary);
    out.write("trainlog_summary.json", &summary.to_json())?;
    out.write("trainlog_summary.txt", &text)?;
    print!("{text}");
    out.finish("trainlog-summarize", &cfg, &a)?;
    Ok(Status::Ok)
}

fn trainlog_export(cfg: RunConfig, a: ExportArgs) -> Result<Status> {
    let fields: Vec<&str> = if a.fields.is_empty() {
        Column::ALL.iter().map(|c| c.as_str()).collect()
    } else {
        a.fields.iter().map(String::as_str).collect()
    };
    for f in &fields {
        f.parse::<Column>().map_err(|e| usage(e.to_string()))?;
    }
    let mut out = Outputs::create(&cfg.out_dir)?;
    let rows = read_log(&a.log, &mut out)?;
    let csv = export_series(&rows, &fields)?;
    out.write("trainlog_series.csv", &csv)?;
    print!("{csv}");
    out.finish("trainlog-export", &cfg, &a)?;
    Ok(Status::Ok)
}

fn build_backend(
    cfg: &RunConfig,
    b: &BackendArgs,
    manifest: &DatasetManifest,
    out: &mut Outputs,
) -> Result<Box<dyn DetectorBackend>> {
    Ok(match b.backend {
        BackendKind::Oracle => {
            let config = OracleConfig {
                jitter_px: b.jitter_px,
                drop_rate: b.drop_rate,
                ghost_rate: b.ghost_rate,
                misclass_rate: b.misclass_rate,
                confidence_floor: b.confidence_floor,
                seed: cfg.seed,
            };
            let n = u32::try_from(cfg.classes.len()).context("taxonomy too large")?;
            Box::new(OracleBackend::new(config, n).map_err(|e| usage(e.to_string()))?)
        }
        BackendKind::Replay => {
            let path = b
                .predictions
                .as_deref()
                .ok_or_else(|| usage("the replay backend needs --predictions"))?;
            let path = input(path)?;
            out.input(&path)?;
            Box::new(FileReplayBackend::load(&path, manifest)?)
        }
        BackendKind::Delay => {
            if !(b.delay_ms.is_finite() && b.delay_ms >= 0.0) {
                return Err(usage(format!(
                    "--delay-ms must be non-negative, got {}",
                    b.delay_ms
                )));
            }
            Box::new(DelayBackend {
                delay: Duration::from_secs_f64(b.delay_ms / 1e3),
            })
        }
        BackendKind::External => {
            let program = b
                .program
                .as_deref()
                .ok_or_else(|| usage("the external backend needs --program"))?;
            let name = program
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("external")
                .to_string();
            Box::new(ExternalProcessBackend::new(
                name,
                program,
                b.program_args.clone(),
            ))
        }
    })
}

fn bench(cfg: RunConfig, a: BenchArgs) -> Result<Status> {
    let manifest_path = input(&a.manifest)?;
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.input(&manifest_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let backend = build_backend(&cfg, &a.backend, &manifest, &mut out)?;
    let manifest = match a.split {
        Some(s) => manifest.filter_split(s),
        None => manifest,
    };
    let latency = measure(backend.as_ref(), &manifest, a.warmup, a.repeats)?;
    out.write("latency.json", &latency.to_json())?;
    out.write("latency_samples.csv", &latency.samples_csv())?;
    println!(
        "{}: {} samples ({} images x {} repeats, {} warmup calls excluded)",
        latency.backend, latency.sample_count, latency.images, latency.repeats, latency.warmup
    );
    println!(
        "mean {:.3} ms, median {:.3} ms, p95 {:.3} ms, min {:.3} ms, max {:.3} ms",
        latency.mean_ms, latency.median_ms, latency.p95_ms, latency.min_ms, latency.max_ms
    );
    out.finish("bench", &cfg, &a)?;
    Ok(Status::Ok)
}

fn predict(cfg: RunConfig, a: PredictArgs) -> Result<Status> {
    let manifest_path = input(&a.manifest)?;
    if let Some(v) = a.nms {
        if !(v > 0.0 && v <= 1.0) {
            return Err(usage(format!("--nms must be within (0, 1], got {v}")));
        }
    }
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.input(&manifest_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let backend = build_backend(&cfg, &a.backend, &manifest, &mut out)?;
    let (mut set, _) = run_detector(backend.as_ref(), &manifest, a.split, cfg.eval.exec)?;
    if let Some(thr) = a.nms {
        for dets in set.detections.values_mut() {
            *dets = nms(dets, thr, true)?;
        }
    }
    out.write("predictions.txt", &set.to_text())?;
    println!(
        "{} detections over {} images from {}",
        set.detection_count(),
        set.images(),
        backend.name()
    );
    out.finish("predict", &cfg, &a)?;
    Ok(Status::Ok)
}

fn report(cfg: RunConfig, a: ReportArgs) -> Result<Status> {
    let recorded = a.recorded.as_deref().map(input).transpose()?;
    let eval_path = a.eval.as_deref().map(input).transpose()?;
    let latency_path = a.latency.as_deref().map(input).transpose()?;
    let trainlog_path = a.trainlog.as_deref().map(input).transpose()?;
    let has_artifacts = eval_path.is_some() || latency_path.is_some() || trainlog_path.is_some();
    if recorded.is_none() && !has_artifacts {
        return Err(usage(
            "report needs at least one input: --recorded, --eval, --latency or --trainlog",
        ));
    }
    let mut out = Outputs::create(&cfg.out_dir)?;

    let mut entries = match &recorded {
        Some(p) => {
            out.input(p)?;
            entries_from_toml(&read_text(p)?).with_context(|| format!("{}", p.display()))?
        }
        None => Vec::new(),
    };
    if has_artifacts {
        let mut entry = ComparisonEntry {
            backend: a.name.clone(),
            ..ComparisonEntry::default()
        };
        if let Some(p) = &eval_path {
            out.input(p)?;
            entry.eval = Some(
                EvalReport::from_json(&read_text(p)?)
                    .with_context(|| format!("evaluation report {}", p.display()))?,
            );
        }
        if let Some(p) = &latency_path {
            out.input(p)?;
            let report: LatencyReport = serde_json::from_str(&read_text(p)?)
                .with_context(|| format!("latency report {}", p.display()))?;
            entry.latency = Some(report);
        }
        if let Some(p) = &trainlog_path {
            out.input(p)?;
            let text = read_text(p)?;
            let summary = if p.extension().and_then(|e| e.to_str()) == Some("json") {
                serde_json::from_str(&text)
                    .with_context(|| format!("training summary {}", p.display()))?
            } else {
                let rows = parse_trainlog_with(&text, &ColumnAliases::default())
                    .with_context(|| format!("training log {}", p.display()))?;
                summarize(&rows)?
            };
            entry.trainlog = Some(summary);
        }
        match entries.iter_mut().find(|e| e.backend == a.name) {
            Some(existing) => {
                existing.eval = entry.eval.or(existing.eval.take());
                existing.latency = entry.latency.or(existing.latency.take());
                existing.trainlog = entry.trainlog.or(existing.trainlog.take());
            }
            None => entries.push(entry),
        }
    }
    if entries.is_empty() {
        return Err(usage("the recorded file has no [[entry]] tables"));
    }

    let document = generate_report(&entries, a.format)?;
    let file = match a.format {
        ReportFormat::Text => "report.txt",
        ReportFormat::Structured => "report.json",
        ReportFormat::Csv => "report.csv",
    };
    out.write(file, &document)?;
    print!("{document}");
    out.finish("report", &cfg, &a)?;
    Ok(Status::Ok)
}
