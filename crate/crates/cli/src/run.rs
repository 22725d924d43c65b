//! Output-directory plumbing: the lockfile and the run manifest.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use remix_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::CliError;

pub const LOCK_FILE: &str = ".remix.lock";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.json";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::config(format!(
                "output directory {} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::config(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_iwae: Option<f64>,
    pub best_val_iwae_se: Option<f64>,
    pub final_train_elbo: Option<f64>,
    pub final_alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub code_version: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub summary: RunSummary,
    /// Files of the run, relative to `output_dir`.
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::config(format!("cannot write {}: {e}", path.display()));
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(fail)?;
    f.write_all(bytes).map_err(fail)?;
    f.sync_all().map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)
}

impl RunManifest {
    /// Writes the manifest after checking that every listed file exists.
    pub fn write(&self) -> Result<PathBuf, CliError> {
        if let Some(missing) = self.files.iter().find(|f| !self.output_dir.join(f).is_file()) {
            return Err(CliError::config(format!(
                "run output {missing} is missing; manifest not written"
            )));
        }
        let path = self.output_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::config(e.to_string()))?;
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(first);
        assert!(!dir.path().join(LOCK_FILE).exists());
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_requires_its_files() {
        let dir = tempfile::tempdir().unwrap();
        let now = Utc::now();
        let mut m = RunManifest {
            config: TrainConfig::default(),
            code_version: code_version(),
            seed: 0,
            output_dir: dir.path().to_path_buf(),
            started_at: now,
            finished_at: now,
            summary: RunSummary {
                epochs: 0,
                best_epoch: None,
                best_val_iwae: None,
                best_val_iwae_se: None,
                final_train_elbo: None,
                final_alpha: vec![],
            },
            files: vec!["absent.csv".into()],
            warnings: vec![],
        };
        assert!(m.write().is_err());
        assert!(!dir.path().join(MANIFEST_FILE).exists());
        fs::write(dir.path().join("absent.csv"), "x").unwrap();
        let path = m.write().unwrap();
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        m.files = back.files.clone();
        assert_eq!(back, m);
    }
}
