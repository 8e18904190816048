//! Run directory layout and locking.
//!
//! A run directory holds config.resolved.json, checkpoints/, datasets/,
//! metrics.jsonl and report.json. Reusing a non-empty directory requires
//! --force, and a lock file keeps concurrent pipelines out.

use std::fs;
use std::path::{Path, PathBuf};

use dfbf_core::error::{Error, Result};

pub struct RunDir {
    root: PathBuf,
    lock: Option<PathBuf>,
}

impl RunDir {
    /// Prepare the directory structure. `force` allows reuse of an
    /// existing, already-populated directory.
    pub fn prepare(root: &Path, force: bool) -> Result<RunDir> {
        if root.exists() {
            let populated = root.join("config.resolved.json").exists()
                || root.join("metrics.jsonl").exists()
                || root.join("report.json").exists();
            if populated && !force {
                return Err(Error::config(format!(
                    "run directory {} already holds results; pass --force to overwrite",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("datasets"))?;
        Ok(RunDir { root: root.to_path_buf(), lock: None })
    }

    /// Take the single-pipeline lock.
    pub fn lock(&mut self) -> Result<()> {
        let path = self.root.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                self.lock = Some(path);
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "run directory {} is locked by another pipeline (remove `lock` if stale)",
                self.root.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.root.join("datasets").join(name)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if let Some(lock) = &self.lock {
            let _ = fs::remove_file(lock);
        }
    }
}
