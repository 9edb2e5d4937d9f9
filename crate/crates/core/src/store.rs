//! On-disk layout for runs, trajectories, datasets, exports and scores.
//!
//! ```text
//! <root>/runs/<run_id>/manifest.json
//! <root>/runs/<run_id>/trajectories/<trajectory_id>.json
//! <root>/runs/<run_id>/lock
//! <root>/datasets/  <root>/exports/  <root>/scores/  <root>/reports/
//! ```
//!
//! Every file is committed with write-to-temp-then-rename, so readers never
//! observe a partial write.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{RolloutPolicy, Termination, Trajectory};

pub const STORE_ENV: &str = "GYM_STORE";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("run `{run_id}` is locked by process {pid}")]
    Locked { run_id: String, pid: u32 },
    #[error("run `{0}` has no manifest")]
    NoManifest(String),
    #[error("trajectory `{0}` not found")]
    MissingTrajectory(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(parent)
        .map_err(io_err(parent))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub instance_id: String,
    pub attempt: usize,
    pub trajectory_id: String,
    pub termination: Termination,
    #[serde(default)]
    pub resolved: Option<bool>,
    /// Why evaluation could not grade the entry, if it could not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset: String,
    pub policy: RolloutPolicy,
    pub agent: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn entry(&self, instance_id: &str, attempt: usize) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.instance_id == instance_id && e.attempt == attempt)
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["runs", "datasets", "exports", "scores", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self { root })
    }

    /// Root from `GYM_STORE`, falling back to `default`.
    pub fn from_env(default: impl Into<PathBuf>) -> Result<Self, StoreError> {
        match std::env::var_os(STORE_ENV) {
            Some(p) if !p.is_empty() => Self::open(PathBuf::from(p)),
            _ => Self::open(default),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("manifest.json")
    }

    pub fn trajectory_path(&self, run_id: &str, trajectory_id: &str) -> PathBuf {
        self.run_dir(run_id)
            .join("trajectories")
            .join(format!("{trajectory_id}.json"))
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn exports_dir(&self) -> PathBuf {
        self.root.join("exports")
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn write_trajectory(&self, run_id: &str, t: &Trajectory) -> Result<(), StoreError> {
        write_json(&self.trajectory_path(run_id, &t.trajectory_id), t)
    }

    pub fn read_trajectory(&self, run_id: &str, trajectory_id: &str) -> Result<Trajectory, StoreError> {
        let path = self.trajectory_path(run_id, trajectory_id);
        if !path.is_file() {
            return Err(StoreError::MissingTrajectory(trajectory_id.to_string()));
        }
        read_json(&path)
    }

    /// All trajectories of a run in manifest order.
    pub fn read_run(&self, run_id: &str) -> Result<Vec<Trajectory>, StoreError> {
        self.read_manifest(run_id)?
            .entries
            .iter()
            .map(|e| self.read_trajectory(run_id, &e.trajectory_id))
            .collect()
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<(), StoreError> {
        write_json(&self.manifest_path(&m.run_id), m)
    }

    pub fn read_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path(run_id);
        if !path.is_file() {
            return Err(StoreError::NoManifest(run_id.to_string()));
        }
        read_json(&path)
    }

    pub fn has_manifest(&self, run_id: &str) -> bool {
        self.manifest_path(run_id).is_file()
    }

    /// Takes the single-writer lock of a run. A lock left by a dead process
    /// is taken over.
    pub fn lock_run(&self, run_id: &str) -> Result<RunLock, StoreError> {
        let dir = self.run_dir(run_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("lock");
        let me = std::process::id();
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{me}").map_err(io_err(&path))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if pid == me || process_alive(pid) => {
                            return Err(StoreError::Locked {
                                run_id: run_id.to_string(),
                                pid,
                            })
                        }
                        _ => {
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
    }
}

fn process_alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence and permission.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
