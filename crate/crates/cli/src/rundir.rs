use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use wsms::config::RunConfig;
use wsms::tensor::Precision;

use crate::{Failure, Global, LoadedData};

const LOCK: &str = ".lock";

/// A run directory owned by this process for its lifetime.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Failure::Usage(format!("{} is in use by another process (remove {} if stale)", path.display(), lock.display()))
            } else {
                Failure::from(e)
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
        fs::write(self.path.join(name), text + "\n")?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK));
    }
}

#[derive(Debug, Serialize)]
pub struct DatasetIdentity {
    pub source: String,
    pub sha256: String,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub artifact_version: &'static str,
    pub config_path: String,
    pub config: &'a RunConfig,
    pub dataset: DatasetIdentity,
    pub seed: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub threads: usize,
}

impl<'a> RunManifest<'a> {
    pub fn new(cfg: &'a RunConfig, config_path: &Path, data: &LoadedData, precision: Precision, g: &Global) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION"),
            config_path: config_path.display().to_string(),
            config: cfg,
            dataset: DatasetIdentity {
                source: data.source.clone(),
                sha256: data.digest.clone(),
            },
            seed: cfg.train.seed,
            precision,
            deterministic: g.deterministic,
            threads: if g.deterministic { 1 } else { rayon::current_num_threads() },
        }
    }
}
