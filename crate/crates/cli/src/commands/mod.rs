pub mod bench;
pub mod eval;
pub mod sample;
pub mod stats;
pub mod train;
pub mod verify;

use std::path::{Path, PathBuf};

use anyhow::Result;
use bd3lm::config::ExperimentConfig;
use bd3lm::data::Vocabulary;
use bd3lm::Bd3Error;

/// Directory holding a checkpoint; `.` for a bare file name.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `--config`, or the `config.toml` a training run left next to `ckpt`.
pub fn find_config(explicit: Option<&Path>, ckpt: Option<&Path>) -> Result<Option<(ExperimentConfig, PathBuf)>> {
    let path = match (explicit, ckpt) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(c)) => {
            let p = parent_dir(c).join("config.toml");
            if !p.exists() {
                return Ok(None);
            }
            p
        }
        (None, None) => return Ok(None),
    };
    let cfg = ExperimentConfig::load(&path)?;
    Ok(Some((cfg, parent_dir(&path))))
}

/// The run's `vocab.txt`, else plain symbols for a synthetic source.
pub fn find_vocabulary(run_dir: &Path, vocab_size: usize) -> Result<Vocabulary> {
    let p = run_dir.join("vocab.txt");
    if p.exists() {
        let v = Vocabulary::load(&p)?;
        if v.size() != vocab_size {
            return Err(Bd3Error::Config(format!("{} has {} ids but the model has {vocab_size}", p.display(), v.size())).into());
        }
        return Ok(v);
    }
    Ok(Vocabulary::synthetic(vocab_size - 1)?)
}

/// Output files go into existing directories only.
pub fn check_output(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    if !dir.is_dir() {
        return Err(Bd3Error::Config(format!("output directory {} does not exist", dir.display())).into());
    }
    Ok(())
}
