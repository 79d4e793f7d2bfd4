//! Run directories: `<out>/{manifest.json, config.json, metrics.jsonl, ckpt/, report/}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub version: String,
    pub git: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    /// Files this stage read, by role.
    pub inputs: BTreeMap<String, String>,
    /// Files this stage wrote, relative to the run directory.
    pub artifacts: Vec<String>,
}

pub struct RunDir {
    pub root: PathBuf,
    manifest: RunManifest,
}

fn git_stamp() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "--short", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

impl RunDir {
    /// Fresh run directory. An existing one is only replaced with `overwrite`.
    pub fn create(root: &Path, stage: &str, config: &impl Serialize, overwrite: bool) -> Result<Self> {
        if root.exists() {
            if !overwrite {
                bail!("{} already exists; pass --overwrite to replace it", root.display());
            }
            std::fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display()))?;
        }
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let config = serde_json::to_value(config)?;
        let run = Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                stage: stage.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                git: git_stamp(),
                seeds: BTreeMap::new(),
                config: config.clone(),
                inputs: BTreeMap::new(),
                artifacts: Vec::new(),
            },
        };
        run.write_json("config.json", &config)?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn seed(&mut self, name: &str, v: u64) {
        self.manifest.seeds.insert(name.into(), v);
    }

    pub fn input(&mut self, role: &str, p: &Path) {
        self.manifest.inputs.insert(role.into(), p.display().to_string());
    }

    pub fn artifact(&mut self, rel: &str) {
        if !self.manifest.artifacts.iter().any(|a| a == rel) {
            self.manifest.artifacts.push(rel.into());
        }
    }

    pub fn write_json(&self, rel: &str, v: &impl Serialize) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&p, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", p.display()))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.artifacts.sort();
        self.write_json("manifest.json", &self.manifest)?;
        Ok(self.root)
    }
}

pub fn read_manifest(root: &Path) -> Result<RunManifest> {
    read_json(&root.join("manifest.json")).with_context(|| format!("{} is not a finished run directory", root.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
}

/// One JSON value per line.
pub struct JsonLines(BufWriter<File>);

impl JsonLines {
    pub fn create(p: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)))
    }

    pub fn write(&mut self, v: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

pub fn read_lines<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", p.display(), i + 1)))
        .collect()
}
