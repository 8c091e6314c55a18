//! Output directory handling and reproducibility stamps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn digest_path(path: &Path) -> Result<FileDigest> {
    if path.is_dir() {
        return Ok(FileDigest {
            path: path.display().to_string(),
            bytes: 0,
            sha256: String::new(),
        });
    }
    let data = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes: data.len() as u64,
        sha256: digest(&data),
    })
}

/// Collects what one subcommand reads and writes, then stamps it.
pub struct Outputs {
    dir: PathBuf,
    inputs: Vec<FileDigest>,
    written: Vec<FileDigest>,
}

#[derive(Serialize)]
struct Stamp<'a, A: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    config: &'a RunConfig,
    args: &'a A,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest_path(path)?);
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(name, contents.as_bytes());
        Ok(path)
    }

    /// Registers a file written by library code under the output directory.
    pub fn record_existing(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let data = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        self.record(name, &data);
        Ok(())
    }

    fn record(&mut self, name: &str, data: &[u8]) {
        self.written.retain(|d| d.path != name);
        self.written.push(FileDigest {
            path: name.to_string(),
            bytes: data.len() as u64,
            sha256: digest(data),
        });
    }

    /// Writes `<subcommand>.stamp.json` and the wall-clock time into a
    /// separate `.stamp.time` file so the stamp itself stays reproducible.
    pub fn finish<A: Serialize>(
        mut self,
        subcommand: &str,
        config: &RunConfig,
        args: &A,
    ) -> Result<()> {
        self.written.sort_by(|a, b| a.path.cmp(&b.path));
        let stamp = Stamp {
            tool: "cactuskit",
            version: cactuskit::TOOL_VERSION,
            subcommand,
            seed: config.seed,
            config,
            args,
            inputs: &self.inputs,
            outputs: &self.written,
        };
        let mut text = serde_json::to_string_pretty(&stamp)?;
        text.push('\n');
        let path = self.dir.join(format!("{subcommand}.stamp.json"));
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = self.dir.join(format!("{subcommand}.stamp.time"));
        fs::write(&path, format!("{secs}\n"))
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
