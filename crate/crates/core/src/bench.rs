//! Per-image latency measurement and model comparison tables.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::detector::DetectorBackend;
use crate::metrics::EvalReport;
use crate::trainlog::TrainLogSummary;

pub const LATENCY_NOTE: &str =
    "per-image wall time of the full detect call, including any pre- and post-processing inside the backend";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("manifest has no images")]
    EmptyManifest,
    #[error("backend {backend} failed on image {image_id}: {message}")]
    Backend {
        backend: String,
        image_id: String,
        message: String,
    },
    #[error("nothing to compare")]
    NoEntries,
    #[error("no entry provides any metric")]
    NoMetrics,
    #[error("comparison file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub image_id: String,
    pub repeat: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub backend: String,
    pub note: String,
    pub images: usize,
    pub repeats: usize,
    /// Warmup calls made before timing; never part of the samples.
    pub warmup: usize,
    pub sample_count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples: Vec<LatencySample>,
}

/// Summary statistics of a non-empty sample list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

pub fn sample_stats(samples: &[f64]) -> Option<SampleStats> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let rank = (95 * n).div_ceil(100).max(1);
    Some(SampleStats {
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
        p95: sorted[rank - 1],
        min: sorted[0],
        max: sorted[n - 1],
    })
}

impl LatencyReport {
    pub fn from_samples(
        backend: impl Into<String>,
        images: usize,
        repeats: usize,
        warmup: usize,
        samples: Vec<LatencySample>,
    ) -> Self {
        let ms: Vec<f64> = samples.iter().map(|s| s.millis).collect();
        let st = sample_stats(&ms).unwrap_or(SampleStats {
            mean: 0.0,
            median: 0.0,
            p95: 0.0,
            min: 0.0,
            max: 0.0,
        });
        Self {
            backend: backend.into(),
            note: LATENCY_NOTE.to_string(),
            images,
            repeats,
            warmup,
            sample_count: samples.len(),
            mean_ms: st.mean,
            median_ms: st.median,
            p95_ms: st.p95,
            min_ms: st.min,
            max_ms: st.max,
            samples,
        }
    }

    pub fn samples_ms(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.millis).collect()
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("index,image_id,repeat,millis\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", s.image_id, s.repeat, s.millis));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("latency report serializes");
        s.push('\n');
        s
    }
}

/// Times `backend.detect` one call at a time. `warmup` untimed calls cycle
/// through the images first; then every image is timed `repeats` times, in
/// image id order within each pass.
pub fn measure(
    backend: &dyn DetectorBackend,
    manifest: &DatasetManifest,
    warmup: usize,
    repeats: usize,
) -> Result<LatencyReport, BenchError> {
    if repeats == 0 {
        return Err(BenchError::NoRepeats);
    }
    let records = manifest.sorted_records(None);
    if records.is_empty() {
        return Err(BenchError::EmptyManifest);
    }
    let fail = |image_id: &str, message: String| BenchError::Backend {
        backend: backend.name().to_string(),
        image_id: image_id.to_string(),
        message,
    };
    for r in records.iter().cycle().take(warmup) {
        backend.detect(r).map_err(|e| fail(&r.image_id, e.0))?;
    }
    let mut samples = Vec::with_capacity(records.len() * repeats);
    for repeat in 0..repeats {
        for r in &records {
            let start = Instant::now();
            let out = backend.detect(r);
            let millis = start.elapsed().as_secs_f64() * 1e3;
            out.map_err(|e| fail(&r.image_id, e.0))?;
            samples.push(LatencySample {
                image_id: r.image_id.clone(),
                repeat,
                millis,
            });
        }
    }
    Ok(LatencyReport::from_samples(
        backend.name(),
        records.len(),
        repeats,
        warmup,
        samples,
    ))
}

/// Values supplied by hand, e.g. figures from a training run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordedMetrics {
    pub map50: Option<f64>,
    pub loss: Option<f64>,
    pub training_time_hours: Option<f64>,
    pub test_time_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub backend: String,
    #[serde(default)]
    pub latency: Option<LatencyReport>,
    #[serde(default)]
    pub eval: Option<EvalReport>,
    #[serde(default)]
    pub trainlog: Option<TrainLogSummary>,
    #[serde(default)]
    pub recorded: RecordedMetrics,
}

#[derive(Deserialize)]
struct EntryFile {
    #[serde(default)]
    entry: Vec<ComparisonEntry>,
}

/// Reads entries from TOML: one `[[entry]]` table per backend, usually with
/// an `[entry.recorded]` table of hand-supplied figures.
pub fn entries_from_toml(text: &str) -> Result<Vec<ComparisonEntry>, BenchError> {
    let file: EntryFile = toml::from_str(text).map_err(|e| BenchError::Parse(e.to_string()))?;
    Ok(file.entry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSource {
    Recorded,
    Eval,
    Trainlog,
    Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub source: CellSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub backend: String,
    pub map50: Option<Cell>,
    pub loss: Option<Cell>,
    pub training_time_hours: Option<Cell>,
    pub test_time_ms: Option<Cell>,
}

impl ComparisonRow {
    pub fn cells(&self) -> [Option<Cell>; 4] {
        [
            self.map50,
            self.loss,
            self.training_time_hours,
            self.test_time_ms,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

fn pick(recorded: Option<f64>, derived: Option<(f64, CellSource)>) -> Option<Cell> {
    match recorded {
        Some(value) => Some(Cell {
            value,
            source: CellSource::Recorded,
        }),
        None => derived.map(|(value, source)| Cell { value, source }),
    }
}

/// One row per entry. A recorded value takes precedence over one derived
/// from an artifact; cells with neither stay empty.
pub fn compare(entries: &[ComparisonEntry]) -> Result<ComparisonTable, BenchError> {
    if entries.is_empty() {
        return Err(BenchError::NoEntries);
    }
    let rows: Vec<ComparisonRow> = entries
        .iter()
        .map(|e| ComparisonRow {
            backend: e.backend.clone(),
            map50: pick(
                e.recorded.map50,
                e.eval.as_ref().map(|r| (r.map50, CellSource::Eval)),
            ),
            loss: pick(
                e.recorded.loss,
                e.trainlog
                    .as_ref()
                    .map(|s| (s.headline_loss(), CellSource::Trainlog)),
            ),
            training_time_hours: pick(e.recorded.training_time_hours, None),
            test_time_ms: pick(
                e.recorded.test_time_ms,
                e.latency.as_ref().map(|l| (l.mean_ms, CellSource::Latency)),
            ),
        })
        .collect();
    if rows.iter().all(|r| r.cells().iter().all(Option::is_none)) {
        return Err(BenchError::NoMetrics);
    }
    Ok(ComparisonTable { rows })
}
