//! Run manifests: what was run, on which inputs, producing which files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Hash of a file, or of every file under a directory in sorted path order.
pub fn digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut files = Vec::new();
    collect(path, &mut files)?;
    files.sort();
    for f in &files {
        if path.is_dir() {
            hasher.update(f.strip_prefix(path).unwrap_or(f).to_string_lossy().as_bytes());
        }
        hasher.update(fs::read(f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.file_name().is_some_and(|n| n == "manifest.json") {
                continue;
            }
            collect(&p, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub struct Recorder {
    manifest: Manifest,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Self {
            manifest: Manifest {
                tool: "mcrec",
                version: env!("CARGO_PKG_VERSION"),
                command: command.into(),
                argv: std::env::args().collect(),
                config: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix: now(),
                finished_unix: 0.0,
            },
        }
    }

    pub fn config(&mut self, config: impl Serialize) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.into(), seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: digest(path)?,
        });
        Ok(())
    }

    /// Writes `contents` to `dir/name` and records the file as an output.
    pub fn write(&mut self, dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.output(name);
        Ok(())
    }

    pub fn output(&mut self, name: &str) {
        self.manifest.outputs.push(name.into());
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.manifest.finished_unix = now();
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
