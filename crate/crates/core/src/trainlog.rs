//! Per-epoch training logs: parsing, best-epoch selection and export.
//!
//! A log is CSV with eight canonical columns (any order):
//! `epoch, box_loss, obj_loss, cls_loss, precision, recall, map50, map50_95`.
//! Column names from common training frameworks are mapped through an
//! alias table, which callers can extend. Fields are trimmed, lines starting
//! with `#` are skipped, and an epoch written as `N/M` reads as `N`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainLogError {
    #[error("log has no header row")]
    MissingHeader,
    #[error("missing column {0}")]
    MissingColumn(Column),
    #[error("columns {first:?} and {second:?} both map to {column}")]
    DuplicateColumn {
        column: Column,
        first: String,
        second: String,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: Column,
        message: String,
    },
    #[error("line {line}, column {column}: {value} is out of range")]
    OutOfRange {
        line: u64,
        column: Column,
        value: f64,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("no rows")]
    Empty,
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("no fields requested")]
    NoFields,
    #[error("alias table line {line}: {message}")]
    Alias { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Epoch,
    BoxLoss,
    ObjLoss,
    ClsLoss,
    Precision,
    Recall,
    Map50,
    Map50_95,
}

impl Column {
    pub const ALL: [Column; 8] = [
        Column::Epoch,
        Column::BoxLoss,
        Column::ObjLoss,
        Column::ClsLoss,
        Column::Precision,
        Column::Recall,
        Column::Map50,
        Column::Map50_95,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Column::Epoch => "epoch",
            Column::BoxLoss => "box_loss",
            Column::ObjLoss => "obj_loss",
            Column::ClsLoss => "cls_loss",
            Column::Precision => "precision",
            Column::Recall => "recall",
            Column::Map50 => "map50",
            Column::Map50_95 => "map50_95",
        }
    }

    fn is_metric(self) -> bool {
        matches!(
            self,
            Column::Precision | Column::Recall | Column::Map50 | Column::Map50_95
        )
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Column {
    type Err = TrainLogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Column::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| TrainLogError::UnknownField(s.to_string()))
    }
}

/// Maps header names to canonical columns. Matching ignores ASCII case.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAliases {
    map: BTreeMap<String, Column>,
}

const BUILTIN_ALIASES: &[(&str, Column)] = &[
    ("Epoch", Column::Epoch),
    ("Box loss", Column::BoxLoss),
    ("Object loss", Column::ObjLoss),
    ("Class loss", Column::ClsLoss),
    ("P", Column::Precision),
    ("R", Column::Recall),
    ("mAP@.5", Column::Map50),
    ("mAP@.5:.95", Column::Map50_95),
    ("train/box_loss", Column::BoxLoss),
    ("train/obj_loss", Column::ObjLoss),
    ("train/cls_loss", Column::ClsLoss),
    ("metrics/precision", Column::Precision),
    ("metrics/recall", Column::Recall),
    ("metrics/mAP_0.5", Column::Map50),
    ("metrics/mAP_0.5:0.95", Column::Map50_95),
    ("metrics/mAP50(B)", Column::Map50),
    ("metrics/mAP50-95(B)", Column::Map50_95),
];

impl Default for ColumnAliases {
    fn default() -> Self {
        let mut aliases = ColumnAliases {
            map: BTreeMap::new(),
        };
        for c in Column::ALL {
            aliases.insert(c.as_str(), c);
        }
        for (name, c) in BUILTIN_ALIASES {
            aliases.insert(name, *c);
        }
        aliases
    }
}

impl ColumnAliases {
    pub fn insert(&mut self, alias: &str, column: Column) {
        self.map.insert(alias.trim().to_ascii_lowercase(), column);
    }

    pub fn resolve(&self, header: &str) -> Option<Column> {
        self.map.get(&header.trim().to_ascii_lowercase()).copied()
    }

    /// Adds `alias = canonical` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn extend_from_text(&mut self, text: &str) -> Result<(), TrainLogError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| TrainLogError::Alias {
                line: idx + 1,
                message,
            };
            let (alias, canonical) = line
                .rsplit_once('=')
                .ok_or_else(|| err("expected `alias = canonical`".into()))?;
            let column: Column = canonical
                .trim()
                .parse()
                .map_err(|_| err(format!("unknown canonical column {:?}", canonical.trim())))?;
            if alias.trim().is_empty() {
                return Err(err("empty alias".into()));
            }
            self.insert(alias, column);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: u32,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

impl TrainLogRow {
    pub fn total_loss(&self) -> f64 {
        self.box_loss + self.obj_loss + self.cls_loss
    }

    pub fn get(&self, column: Column) -> f64 {
        match column {
            Column::Epoch => f64::from(self.epoch),
            Column::BoxLoss => self.box_loss,
            Column::ObjLoss => self.obj_loss,
            Column::ClsLoss => self.cls_loss,
            Column::Precision => self.precision,
            Column::Recall => self.recall,
            Column::Map50 => self.map50,
            Column::Map50_95 => self.map50_95,
        }
    }
}

pub fn parse_trainlog(text: &str) -> Result<Vec<TrainLogRow>, TrainLogError> {
    parse_trainlog_with(text, &ColumnAliases::default())
}

/// Parses a log; rows come back sorted by epoch. Unmapped columns are
/// ignored.
pub fn parse_trainlog_with(
    text: &str,
    aliases: &ColumnAliases,
) -> Result<Vec<TrainLogRow>, TrainLogError> {
    if text.trim().is_empty() {
        return Err(TrainLogError::MissingHeader);
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| TrainLogError::Csv(e.to_string()))?
        .clone();
    let mut index: BTreeMap<Column, (usize, String)> = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(c) = aliases.resolve(h) {
            if let Some((_, first)) = index.get(&c) {
                return Err(TrainLogError::DuplicateColumn {
                    column: c,
                    first: first.clone(),
                    second: h.to_string(),
                });
            }
            index.insert(c, (i, h.to_string()));
        }
    }
    if let Some(missing) = Column::ALL.into_iter().find(|c| !index.contains_key(c)) {
        return Err(TrainLogError::MissingColumn(missing));
    }
    let col = |c: Column| index[&c].0;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| TrainLogError::Csv(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: Column| record.get(col(c)).unwrap_or("");
        let epoch_text = field(Column::Epoch);
        // "12/599" style progress counters
        let epoch_head = epoch_text.split('/').next().unwrap_or("").trim();
        let epoch: u32 = epoch_head.parse().map_err(|_| TrainLogError::Parse {
            line,
            column: Column::Epoch,
            message: format!("bad epoch {epoch_text:?}"),
        })?;
        let mut vals = [0.0f64; 7];
        for (slot, c) in vals.iter_mut().zip(&Column::ALL[1..]) {
            let text = field(*c);
            let v: f64 = text.parse().map_err(|_| TrainLogError::Parse {
                line,
                column: *c,
                message: format!("bad number {text:?}"),
            })?;
            let ok = v.is_finite() && v >= 0.0 && (!c.is_metric() || v <= 1.0);
            if !ok {
                return Err(TrainLogError::OutOfRange {
                    line,
                    column: *c,
                    value: v,
                });
            }
            *slot = v;
        }
        rows.push(TrainLogRow {
            epoch,
            box_loss: vals[0],
            obj_loss: vals[1],
            cls_loss: vals[2],
            precision: vals[3],
            recall: vals[4],
            map50: vals[5],
            map50_95: vals[6],
        });
    }
    rows.sort_by_key(|r| r.epoch);
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Map50,
    Map50_95,
    Recall,
    Precision,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Map50,
        Criterion::Map50_95,
        Criterion::Recall,
        Criterion::Precision,
    ];

    pub fn column(self) -> Column {
        match self {
            Criterion::Map50 => Column::Map50,
            Criterion::Map50_95 => Column::Map50_95,
            Criterion::Recall => Column::Recall,
            Criterion::Precision => Column::Precision,
        }
    }
}

impl FromStr for Criterion {
    type Err = TrainLogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.column().as_str() == s)
            .ok_or_else(|| TrainLogError::UnknownField(s.to_string()))
    }
}

/// Row maximising the criterion; ties go to the lower epoch.
pub fn best_epoch(
    rows: &[TrainLogRow],
    criterion: Criterion,
) -> Result<TrainLogRow, TrainLogError> {
    let col = criterion.column();
    let mut best: Option<&TrainLogRow> = None;
    for r in rows {
        best = match best {
            None => Some(r),
            Some(b) => {
                let (rv, bv) = (r.get(col), b.get(col));
                if rv > bv || (rv == bv && r.epoch < b.epoch) {
                    Some(r)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.copied().ok_or(TrainLogError::Empty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: u32,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogSummary {
    pub row_count: usize,
    pub final_row: TrainLogRow,
    pub best_map50: TrainLogRow,
    pub best_map50_95: TrainLogRow,
    pub best_recall: TrainLogRow,
    pub best_precision: TrainLogRow,
    pub total_loss: Vec<EpochLoss>,
}

impl TrainLogSummary {
    pub fn best(&self, criterion: Criterion) -> &TrainLogRow {
        match criterion {
            Criterion::Map50 => &self.best_map50,
            Criterion::Map50_95 => &self.best_map50_95,
            Criterion::Recall => &self.best_recall,
            Criterion::Precision => &self.best_precision,
        }
    }

    /// Loss reported for comparisons: total loss of the best-mAP@.5 row.
    pub fn headline_loss(&self) -> f64 {
        self.best_map50.total_loss()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

pub fn summarize(rows: &[TrainLogRow]) -> Result<TrainLogSummary, TrainLogError> {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.epoch);
    let final_row = *sorted.last().ok_or(TrainLogError::Empty)?;
    Ok(TrainLogSummary {
        row_count: sorted.len(),
        final_row,
        best_map50: best_epoch(&sorted, Criterion::Map50)?,
        best_map50_95: best_epoch(&sorted, Criterion::Map50_95)?,
        best_recall: best_epoch(&sorted, Criterion::Recall)?,
        best_precision: best_epoch(&sorted, Criterion::Precision)?,
        total_loss: sorted
            .iter()
            .map(|r| EpochLoss {
                epoch: r.epoch,
                total_loss: r.total_loss(),
            })
            .collect(),
    })
}

/// Epoch-ordered CSV of the requested canonical columns. Floats use the
/// shortest text that parses back to the same value.
pub fn export_series(rows: &[TrainLogRow], fields: &[&str]) -> Result<String, TrainLogError> {
    if fields.is_empty() {
        return Err(TrainLogError::NoFields);
    }
    let columns: Vec<Column> = fields.iter().map(|f| f.parse()).collect::<Result<_, _>>()?;
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.epoch);
    let mut out = columns
        .iter()
        .map(|c| c.as_str())
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for r in &sorted {
        let cells: Vec<String> = columns
            .iter()
            .map(|c| match c {
                Column::Epoch => r.epoch.to_string(),
                other => r.get(*other).to_string(),
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}
