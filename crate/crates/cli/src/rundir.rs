//! Run directories and their `manifest.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use bd3lm::config::ExperimentConfig;
use bd3lm::Bd3Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::report::VERSION;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    /// SHA-256 of the resolved config, hex.
    pub config_hash: String,
    /// Paths relative to the run directory.
    pub files: BTreeSet<String>,
}

/// Hash of the resolved config with the step count cleared, so a run can be
/// extended with `--steps` and `--resume` in its own directory.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut cfg = cfg.clone();
    cfg.train.steps = 0;
    let digest = Sha256::digest(cfg.to_toml()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `path` or reopens it. Reopening with a different config is a
    /// config error.
    pub fn open(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(path)?;
        let hash = config_hash(cfg)?;
        let manifest = match read_manifest(path)? {
            Some(m) if m.config_hash != hash => {
                return Err(Bd3Error::Config(format!(
                    "{} was created from a different config (hash {})",
                    path.display(),
                    &m.config_hash[..12]
                ))
                .into())
            }
            Some(m) => m,
            None => Manifest {
                version: VERSION.to_string(),
                config_hash: hash,
                files: BTreeSet::new(),
            },
        };
        let dir = Self {
            path: path.to_path_buf(),
            manifest,
        };
        dir.save()?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Lists `name` in the manifest if it exists on disk.
    pub fn record(&mut self, name: &str) -> Result<()> {
        if self.path.join(name).exists() {
            self.manifest.files.insert(name.to_string());
        }
        self.save()
    }

    fn save(&self) -> Result<()> {
        fs::write(self.path.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let p = dir.join(MANIFEST);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
}

/// Adds `file` to the manifest of the directory containing it, if that
/// directory is a run directory.
pub fn record_output(file: &Path) -> Result<()> {
    let dir = crate::commands::parent_dir(file);
    if let Some(mut m) = read_manifest(&dir)? {
        if let Some(name) = file.file_name().and_then(|n| n.to_str()) {
            m.files.insert(name.to_string());
            fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_tracks_files_and_rejects_other_configs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut run = RunDir::open(tmp.path(), &cfg).unwrap();
        fs::write(run.file("a.txt"), "x").unwrap();
        run.record("a.txt").unwrap();
        run.record("missing.txt").unwrap();
        let m = read_manifest(tmp.path()).unwrap().unwrap();
        assert_eq!(m.files.iter().collect::<Vec<_>>(), ["a.txt"]);
        assert_eq!(m.config_hash.len(), 64);
        assert!(RunDir::open(tmp.path(), &cfg).is_ok());
        let mut longer = cfg.clone();
        longer.train.steps += 10;
        assert!(RunDir::open(tmp.path(), &longer).is_ok());

        let other = ExperimentConfig {
            seed: 9,
            ..ExperimentConfig::default()
        };
        let err = RunDir::open(tmp.path(), &other).err().unwrap();
        assert!(matches!(err.downcast_ref::<Bd3Error>(), Some(Bd3Error::Config(_))));
    }
}
