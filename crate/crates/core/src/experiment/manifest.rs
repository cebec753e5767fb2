//! Run manifests: every persisted artifact with its digest, plus timings.
//! A manifest is rewritten after each stage so an interrupted run can resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: ExperimentKind,
    pub config_digest: String,
    pub code_version: String,
    pub artifacts: BTreeMap<String, Artifact>,
    /// Seconds spent producing each artifact.
    pub wall_clock: BTreeMap<String, f64>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            kind: cfg.kind,
            config_digest: cfg.digest(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
            wall_clock: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn artifact_path(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        self.artifacts
            .get(name)
            .map(|a| dir.join(&a.path))
            .ok_or_else(|| Error::Config(format!("manifest has no artifact {name:?}")))
    }

    /// Checks that every listed artifact exists with its recorded digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in self.artifacts.values() {
            let found = file_digest(&dir.join(&a.path))?;
            if found != a.sha256 {
                return Err(Error::DigestMismatch {
                    expected: a.sha256.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    fn reusable(&self, dir: &Path, name: &str) -> Option<PathBuf> {
        let a = self.artifacts.get(name)?;
        let path = dir.join(&a.path);
        match file_digest(&path) {
            Ok(d) if d == a.sha256 => Some(path),
            _ => None,
        }
    }
}

/// An output directory with its manifest.
pub struct Workspace {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    resume: bool,
}

impl Workspace {
    /// With `resume`, a manifest for the same config digest is picked up and
    /// its intact artifacts are reused; otherwise a fresh manifest starts.
    pub fn open(dir: &Path, cfg: &ExperimentConfig, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let fresh = RunManifest::new(cfg);
        let manifest = if resume {
            match RunManifest::load(dir) {
                Ok(m) if m.config_digest == fresh.config_digest => m,
                Ok(_) => {
                    log::warn!("manifest in {} belongs to another config; starting over", dir.display());
                    fresh
                }
                Err(_) => fresh,
            }
        } else {
            fresh
        };
        let mut ws = Workspace {
            dir: dir.to_path_buf(),
            manifest,
            resume,
        };
        let cfg_text = cfg.to_json();
        ws.stage("config", "config.json", |p| {
            std::fs::write(p, &cfg_text).map_err(|e| Error::io(p, e))
        })?;
        Ok(ws)
    }

    /// Produces artifact `name` at `rel` unless resuming finds it intact.
    pub fn stage(
        &mut self,
        name: &str,
        rel: &str,
        produce: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<PathBuf> {
        if self.resume {
            if let Some(p) = self.manifest.reusable(&self.dir, name) {
                log::info!("reusing {name}");
                return Ok(p);
            }
        }
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let start = Instant::now();
        produce(&path)?;
        let secs = start.elapsed().as_secs_f64();
        self.manifest.artifacts.insert(
            name.to_string(),
            Artifact {
                path: rel.to_string(),
                sha256: file_digest(&path)?,
            },
        );
        self.manifest.wall_clock.insert(name.to_string(), secs);
        self.manifest.save(&self.dir)?;
        Ok(path)
    }
}
