//! Isolated, resettable working copies where patches are applied and test
//! commands run.
//!
//! [`LocalBackend`] is the reference backend: each sandbox is a private copy
//! of the instance's snapshot directory in a temp dir, and commands run as
//! subprocesses rooted there with a scrubbed environment. [`ContainerBackend`]
//! carries the configuration surface for image-based environments but cannot
//! start containers in this build.

mod exec;
mod runner;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::TempDir;
use thiserror::Error;

pub use exec::{run_process, truncation_marker, ExecResult, KILL_EXIT_CODE};
pub use runner::{split_test_id, RunnerConfig, TestOutcome, TestReport};

use crate::diff::{self, ApplyError, Patch};
use crate::task::{TaskInstance, TestId};

pub const DEFAULT_OUTPUT_CAP: usize = 8 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("snapshot missing for `{instance}`: {path}")]
    SnapshotMissing { instance: String, path: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("sandbox {0} is closed")]
    Closed(String),
    #[error("patch does not apply: {0}")]
    Apply(#[from] ApplyError),
    #[error("failed to spawn command: {0}")]
    Spawn(String),
    #[error("invalid path `{0}`")]
    BadPath(String),
    #[error("edit failed: {0}")]
    Edit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    LocalProcess,
    Container,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SandboxState {
    Fresh,
    Dirty,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxOptions {
    #[serde(default = "default_cap")]
    pub output_cap: usize,
    #[serde(default = "default_grace_ms")]
    pub grace_ms: u64,
    /// Outer context lines a hunk may drop when its exact context fails.
    #[serde(default)]
    pub fuzz: usize,
}

fn default_cap() -> usize {
    DEFAULT_OUTPUT_CAP
}

fn default_grace_ms() -> u64 {
    2000
}

impl Default for SandboxOptions {
    fn default() -> Self {
        Self {
            output_cap: DEFAULT_OUTPUT_CAP,
            grace_ms: default_grace_ms(),
            fuzz: 0,
        }
    }
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn open(&self, instance: &TaskInstance) -> Result<Sandbox, SandboxError>;
}

/// Snapshots live at `<snapshots>/<instance_id>/`.
#[derive(Debug, Clone)]
pub struct LocalBackend {
    pub snapshots: PathBuf,
    pub options: SandboxOptions,
}

impl LocalBackend {
    pub fn new(snapshots: impl Into<PathBuf>) -> Self {
        Self {
            snapshots: snapshots.into(),
            options: SandboxOptions::default(),
        }
    }

    pub fn snapshot_dir(&self, instance: &TaskInstance) -> PathBuf {
        self.snapshots.join(&instance.instance_id)
    }
}

impl Backend for LocalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::LocalProcess
    }

    fn open(&self, instance: &TaskInstance) -> Result<Sandbox, SandboxError> {
        Sandbox::create(
            &instance.instance_id,
            self.snapshot_dir(instance),
            BackendKind::LocalProcess,
            self.options.clone(),
        )
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ContainerBackend {
    pub runtime: String,
    #[serde(default)]
    pub images: Vec<String>,
}

impl Backend for ContainerBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Container
    }

    fn open(&self, instance: &TaskInstance) -> Result<Sandbox, SandboxError> {
        match &instance.image_ref {
            None => Err(SandboxError::BackendUnavailable(format!(
                "instance `{}` has no image_ref",
                instance.instance_id
            ))),
            Some(image) if !self.images.contains(image) => Err(SandboxError::BackendUnavailable(
                format!("unknown image `{image}`"),
            )),
            Some(image) => Err(SandboxError::BackendUnavailable(format!(
                "container runtime `{}` cannot start `{image}`: only the local-process backend executes",
                self.runtime
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    LocalProcess {
        snapshots: PathBuf,
        #[serde(flatten, default)]
        options: SandboxOptions,
    },
    Container(ContainerBackend),
}

impl BackendConfig {
    pub fn build(&self) -> Box<dyn Backend> {
        match self {
            BackendConfig::LocalProcess { snapshots, options } => Box::new(LocalBackend {
                snapshots: snapshots.clone(),
                options: options.clone(),
            }),
            BackendConfig::Container(c) => Box::new(c.clone()),
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// A single-owner working copy of one instance's base snapshot.
#[derive(Debug)]
pub struct Sandbox {
    pub sandbox_id: String,
    pub instance_ref: String,
    pub backend: BackendKind,
    state: SandboxState,
    base: PathBuf,
    dir: Option<TempDir>,
    options: SandboxOptions,
}

impl Sandbox {
    fn create(
        instance: &str,
        base: PathBuf,
        backend: BackendKind,
        options: SandboxOptions,
    ) -> Result<Self, SandboxError> {
        if !base.is_dir() {
            return Err(SandboxError::SnapshotMissing {
                instance: instance.to_string(),
                path: base.display().to_string(),
            });
        }
        let dir = tempfile::Builder::new().prefix("gym-sb-").tempdir()?;
        copy_tree(&base, dir.path())?;
        let n = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Ok(Self {
            sandbox_id: format!("sb-{}-{n}", std::process::id()),
            instance_ref: instance.to_string(),
            backend,
            state: SandboxState::Fresh,
            base,
            dir: Some(dir),
            options,
        })
    }

    pub fn state(&self) -> SandboxState {
        self.state
    }

    pub fn options(&self) -> &SandboxOptions {
        &self.options
    }

    pub fn workdir(&self) -> Result<&Path, SandboxError> {
        self.dir
            .as_ref()
            .map(TempDir::path)
            .ok_or_else(|| SandboxError::Closed(self.sandbox_id.clone()))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base
    }

    /// Applies a unified diff atomically. An empty patch is a no-op.
    pub fn apply_patch(&mut self, patch: &str) -> Result<Vec<String>, SandboxError> {
        let root = self.workdir()?.to_path_buf();
        let parsed = Patch::parse(patch).map_err(ApplyError::from)?;
        if parsed.files.is_empty() {
            return Ok(Vec::new());
        }
        let files = diff::apply_to_dir(&root, &parsed, self.options.fuzz)?;
        self.state = SandboxState::Dirty;
        Ok(files)
    }

    pub fn run_command(
        &mut self,
        argv: &[String],
        timeout: Duration,
        env: &BTreeMap<String, String>,
    ) -> Result<ExecResult, SandboxError> {
        let root = self.workdir()?.to_path_buf();
        self.state = SandboxState::Dirty;
        run_process(
            argv,
            &root,
            env,
            timeout,
            self.options.output_cap,
            Duration::from_millis(self.options.grace_ms),
        )
    }

    pub fn run_tests(
        &mut self,
        tests: &BTreeSet<TestId>,
        runner: &RunnerConfig,
    ) -> Result<TestReport, SandboxError> {
        let root = self.workdir()?.to_path_buf();
        let root_str = root.to_string_lossy().into_owned();
        let timeout = Duration::from_secs_f64(runner.timeout_secs);
        let mut report = TestReport {
            results: BTreeMap::new(),
            raw: BTreeMap::new(),
        };
        for test in tests {
            let (file, _) = split_test_id(test);
            if runner.require_file && (!safe_relative(file) || !root.join(file).is_file()) {
                report.results.insert(test.clone(), TestOutcome::Missing);
                continue;
            }
            let argv = runner.render(test, &root_str);
            let res = self.run_command(&argv, timeout, &runner.env)?;
            report.results.insert(test.clone(), runner.classify(&res));
            report.raw.insert(test.clone(), res);
        }
        Ok(report)
    }

    /// Runs the runner's discovery command, if any, returning the listed ids.
    pub fn discover_tests(&mut self, runner: &RunnerConfig) -> Result<BTreeSet<TestId>, SandboxError> {
        let Some(template) = &runner.discover else {
            return Ok(BTreeSet::new());
        };
        let root = self.workdir()?.to_string_lossy().into_owned();
        let argv: Vec<String> = template.iter().map(|a| a.replace("{workdir}", &root)).collect();
        let res = self.run_command(
            &argv,
            Duration::from_secs_f64(runner.timeout_secs),
            &runner.env,
        )?;
        Ok(res
            .stdout
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }

    /// Restores the workdir byte-exactly to the base snapshot.
    pub fn reset(&mut self) -> Result<(), SandboxError> {
        let root = self.workdir()?.to_path_buf();
        if self.state == SandboxState::Fresh {
            return Ok(());
        }
        if !self.base.is_dir() {
            return Err(SandboxError::SnapshotMissing {
                instance: self.instance_ref.clone(),
                path: self.base.display().to_string(),
            });
        }
        for entry in fs::read_dir(&root)? {
            let path = entry?.path();
            if path.is_dir() && !path.is_symlink() {
                fs::remove_dir_all(&path)?;
            } else {
                fs::remove_file(&path)?;
            }
        }
        copy_tree(&self.base, &root)?;
        self.state = SandboxState::Fresh;
        Ok(())
    }

    /// Unified diff of the workdir against the base snapshot.
    pub fn current_diff(&self) -> Result<String, SandboxError> {
        let root = self.workdir()?;
        Ok(diff::diff_trees(&self.base, root)?)
    }

    pub fn tree_hash(&self) -> Result<String, SandboxError> {
        Ok(tree_hash(self.workdir()?)?)
    }

    pub fn read_file(&self, rel: &str) -> Result<String, SandboxError> {
        let path = self.resolve(rel)?;
        fs::read_to_string(&path).map_err(|e| SandboxError::Edit(format!("{rel}: {e}")))
    }

    pub fn write_file(&mut self, rel: &str, content: &str) -> Result<(), SandboxError> {
        let path = self.resolve(rel)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(&path)?;
        f.write_all(content.as_bytes())?;
        self.state = SandboxState::Dirty;
        Ok(())
    }

    /// Replaces the single occurrence of `old` in `rel` with `new`. An empty
    /// `old` creates the file, which must not exist yet.
    pub fn replace_in_file(&mut self, rel: &str, old: &str, new: &str) -> Result<(), SandboxError> {
        let path = self.resolve(rel)?;
        if old.is_empty() {
            if path.exists() {
                return Err(SandboxError::Edit(format!("{rel}: file already exists")));
            }
            return self.write_file(rel, new);
        }
        let text = self.read_file(rel)?;
        match text.matches(old).count() {
            1 => self.write_file(rel, &text.replacen(old, new, 1)),
            0 => Err(SandboxError::Edit(format!("{rel}: search text not found"))),
            n => Err(SandboxError::Edit(format!(
                "{rel}: search text is ambiguous ({n} matches)"
            ))),
        }
    }

    fn resolve(&self, rel: &str) -> Result<PathBuf, SandboxError> {
        if !safe_relative(rel) {
            return Err(SandboxError::BadPath(rel.to_string()));
        }
        Ok(self.workdir()?.join(rel))
    }

    /// Removes the workdir. Every later operation fails with `Closed`.
    pub fn close(&mut self) {
        self.dir = None;
        self.state = SandboxState::Closed;
    }
}

fn safe_relative(rel: &str) -> bool {
    !rel.is_empty()
        && Path::new(rel)
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

/// Copies regular files and directories from `src` into `dst`.
pub fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(src).follow_links(false) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("child of src");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// SHA-256 over every regular file's relative path and content.
pub fn tree_hash(root: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for rel in diff::list_files(root)? {
        let bytes = fs::read(root.join(&rel))?;
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
