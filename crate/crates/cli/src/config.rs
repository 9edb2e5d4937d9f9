//! The `gym.toml` configuration file.
//!
//! ```toml
//! [store]
//! root = "gym-store"
//!
//! [backend]
//! kind = "local-process"
//! snapshots = "snapshots"
//!
//! [runner]
//! argv = ["sh", "{file}", "{case}"]
//!
//! [policy]
//! max_turns = 50
//! ```
//!
//! Relative paths are resolved against the file's directory. Command-line
//! flags override the file, which overrides built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gym_core::rollout::RolloutPolicy;
use gym_core::sandbox::{BackendConfig, RunnerConfig, SandboxOptions};
use serde::Deserialize;

pub const DEFAULT_STORE: &str = "gym-store";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreSection {
    root: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    store: StoreSection,
    backend: Option<BackendConfig>,
    runner: Option<RunnerConfig>,
    policy: Option<toml::Table>,
}

#[derive(Debug, Default)]
pub struct Config {
    pub store_root: Option<PathBuf>,
    pub backend: Option<BackendConfig>,
    pub runner: Option<RunnerConfig>,
    policy: toml::Table,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let file: FileConfig = toml::from_str(text)?;
        let backend = file.backend.map(|b| match b {
            BackendConfig::LocalProcess { snapshots, options } => BackendConfig::LocalProcess {
                snapshots: resolve(base, &snapshots),
                options,
            },
            other => other,
        });
        let policy = file.policy.unwrap_or_default();
        let known = serde_json::to_value(RolloutPolicy::default())?;
        for key in policy.keys() {
            if known.get(key).is_none() {
                bail!("unknown policy key `{key}`");
            }
        }
        Ok(Self {
            store_root: file.store.root.map(|r| resolve(base, &r)),
            backend,
            runner: file.runner,
            policy,
        })
    }

    /// Defaults overlaid with the file's `[policy]` table.
    pub fn policy(&self) -> Result<RolloutPolicy> {
        let mut v = serde_json::to_value(RolloutPolicy::default())?;
        let overlay = serde_json::to_value(&self.policy)?;
        if let (Some(base), Some(over)) = (v.as_object_mut(), overlay.as_object()) {
            for (k, val) in over {
                base.insert(k.clone(), val.clone());
            }
        }
        serde_json::from_value(v).context("invalid [policy] section")
    }

    /// The configured backend, or local snapshots next to the dataset.
    pub fn backend_for(&self, dataset: &Path) -> BackendConfig {
        self.backend.clone().unwrap_or_else(|| BackendConfig::LocalProcess {
            snapshots: dataset.parent().unwrap_or(Path::new(".")).join("snapshots"),
            options: SandboxOptions::default(),
        })
    }

    /// The configured runner, or one that runs `sh <file> <case>`.
    pub fn runner(&self) -> RunnerConfig {
        self.runner
            .clone()
            .unwrap_or_else(|| RunnerConfig::new(vec!["sh".into(), "{file}".into(), "{case}".into()]))
    }

    /// Flag (or `GYM_STORE`) first, then the file, then the default.
    pub fn store_root(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.store_root.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
    }
}
