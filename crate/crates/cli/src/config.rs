//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cactuskit::{ClassTaxonomy, EvalConfig, Interpolation, LabelFormat, SplitSpec};
use serde::{Deserialize, Serialize};

pub const OUT_DIR_ENV: &str = "CACTUSKIT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "cactuskit-out";

/// Bad invocation or configuration. Maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub label_format: Option<LabelFormat>,
    pub sequential: Option<bool>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_frac: Option<f64>,
    pub val_frac: Option<f64>,
    pub test_frac: Option<f64>,
    pub group_augmented: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: Option<f64>,
    pub confidence_threshold: Option<f64>,
    pub interpolation: Option<Interpolation>,
}

impl FileConfig {
    /// Relative paths inside the file are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out_dir = cfg.out_dir.map(|p| base.join(p));
        cfg.taxonomy = cfg.taxonomy.map(|p| base.join(p));
        Ok(cfg)
    }
}

/// Global flags that override the file.
#[derive(Debug, Default)]
pub struct GlobalOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub sequential: bool,
}

/// The effective configuration, echoed into every stamp.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `None` means the built-in six-class taxonomy.
    pub taxonomy: Option<PathBuf>,
    pub label_format: LabelFormat,
    pub sequential: bool,
    pub split: SplitSpec,
    pub eval: EvalConfig,
    #[serde(skip)]
    pub classes: ClassTaxonomy,
}

impl RunConfig {
    pub fn resolve(file: FileConfig, flags: GlobalOverrides) -> Result<Self> {
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        let out_dir = flags
            .out_dir
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        let taxonomy = flags.taxonomy.or(file.taxonomy).map(absolute).transpose()?;
        let classes = match &taxonomy {
            None => ClassTaxonomy::cactus(),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read taxonomy {}: {e}", path.display())))?;
                ClassTaxonomy::from_toml_str(&text)
                    .map_err(|e| usage(format!("taxonomy {}: {e}", path.display())))?
            }
        };
        let defaults = SplitSpec::default();
        let split = SplitSpec {
            train_frac: file.split.train_frac.unwrap_or(defaults.train_frac),
            val_frac: file.split.val_frac.unwrap_or(defaults.val_frac),
            test_frac: file.split.test_frac.unwrap_or(defaults.test_frac),
            seed,
            group_augmented: file
                .split
                .group_augmented
                .unwrap_or(defaults.group_augmented),
        };
        let sequential = flags.sequential || file.sequential.unwrap_or(false);
        let mut eval = EvalConfig::default();
        if let Some(v) = file.eval.iou_threshold {
            eval.iou_threshold = v;
        }
        if let Some(v) = file.eval.confidence_threshold {
            eval.confidence_threshold = v;
        }
        if let Some(v) = file.eval.interpolation {
            eval.interpolation = v;
        }
        eval.exec = if sequential {
            cactuskit::par::Execution::Sequential
        } else {
            cactuskit::par::Execution::Auto
        };
        Ok(Self {
            seed,
            out_dir: absolute(out_dir)?,
            taxonomy,
            label_format: file.label_format.unwrap_or_default(),
            sequential,
            split,
            eval,
            classes,
        })
    }
}

pub fn absolute(path: PathBuf) -> Result<PathBuf> {
    std::path::absolute(&path).with_context(|| format!("cannot resolve {}", path.display()))
}

/// Resolves an input path and checks that it exists before any work starts.
pub fn input(path: &Path) -> Result<PathBuf> {
    let abs = absolute(path.to_path_buf())?;
    if !abs.exists() {
        return Err(usage(format!("input not found: {}", path.display())));
    }
    Ok(abs)
}
