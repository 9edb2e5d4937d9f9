//! Task instances, dataset files and the repository / Lite filter predicates.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::diff::{ParseError, Patch};

pub type TestId = String;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate instance_id `{0}`")]
    DuplicateId(String),
    #[error("instance `{id}`: {message}")]
    Invariant { id: String, message: String },
}

/// One executable issue-fixing task.
///
/// Serialized with SWE-Bench record keys: the gold patch lives under `patch`
/// and the test sets under `FAIL_TO_PASS` / `PASS_TO_PASS`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub instance_id: String,
    pub repo: String,
    pub base_commit: String,
    pub problem_statement: String,
    #[serde(rename = "patch")]
    pub gold_patch: String,
    pub test_patch: String,
    #[serde(rename = "FAIL_TO_PASS", deserialize_with = "test_list")]
    pub fail_to_pass: BTreeSet<TestId>,
    #[serde(rename = "PASS_TO_PASS", deserialize_with = "test_list")]
    pub pass_to_pass: BTreeSet<TestId>,
    pub version: String,
    #[serde(deserialize_with = "timestamp")]
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl TaskInstance {
    /// Every test the resolution check runs: F2P followed by P2P.
    pub fn graded_tests(&self) -> BTreeSet<TestId> {
        self.fail_to_pass.union(&self.pass_to_pass).cloned().collect()
    }

    pub fn check(&self, require_tests: bool) -> Result<(), DatasetError> {
        let fail = |message: &str| DatasetError::Invariant {
            id: self.instance_id.clone(),
            message: message.to_string(),
        };
        if self.instance_id.is_empty() {
            return Err(fail("empty instance_id"));
        }
        if self.gold_patch.trim().is_empty() {
            return Err(fail("gold patch is empty"));
        }
        if let Some(t) = self.fail_to_pass.intersection(&self.pass_to_pass).next() {
            return Err(fail(&format!("test `{t}` is both FAIL_TO_PASS and PASS_TO_PASS")));
        }
        if require_tests && self.fail_to_pass.is_empty() {
            return Err(fail("FAIL_TO_PASS is empty"));
        }
        Ok(())
    }
}

/// Accepts either a JSON array or a JSON string holding an encoded array,
/// both of which appear in published SWE-Bench exports.
fn test_list<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<TestId>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        List(Vec<String>),
        Encoded(String),
    }
    match Raw::deserialize(d)? {
        Raw::List(v) => Ok(v.into_iter().collect()),
        Raw::Encoded(s) if s.trim().is_empty() => Ok(BTreeSet::new()),
        Raw::Encoded(s) => serde_json::from_str::<Vec<String>>(&s)
            .map(|v| v.into_iter().collect())
            .map_err(serde::de::Error::custom),
    }
}

fn timestamp<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
    let s = String::deserialize(d)?;
    parse_timestamp(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp `{s}`")))
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Raw,
    Full,
    Lite,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Split::Raw),
            "full" => Ok(Split::Full),
            "lite" => Ok(Split::Lite),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub instances: Vec<TaskInstance>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, instances: Vec<TaskInstance>) -> Result<Self, DatasetError> {
        let ds = Self {
            name: name.into(),
            split,
            instances,
        };
        ds.check(&LitePolicy::default())?;
        Ok(ds)
    }

    pub fn get(&self, instance_id: &str) -> Option<&TaskInstance> {
        self.instances.iter().find(|i| i.instance_id == instance_id)
    }

    fn check(&self, lite: &LitePolicy) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.instance_id.as_str()) {
                return Err(DatasetError::DuplicateId(inst.instance_id.clone()));
            }
            inst.check(self.split != Split::Raw)?;
            if self.split == Split::Lite {
                let ok = lite_filter(inst, lite).map_err(|e| DatasetError::Invariant {
                    id: inst.instance_id.clone(),
                    message: format!("gold patch: {e}"),
                })?;
                if !ok {
                    return Err(DatasetError::Invariant {
                        id: inst.instance_id.clone(),
                        message: "does not pass the lite filter".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset, DatasetError> {
    load_dataset_with(path, split, &LitePolicy::default())
}

pub fn load_dataset_with(path: &Path, split: Split, lite: &LitePolicy) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let instances = parse_records(&text)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ds = Dataset {
        name,
        split,
        instances,
    };
    ds.check(lite)?;
    Ok(ds)
}

pub fn parse_records(text: &str) -> Result<Vec<TaskInstance>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for inst in &ds.instances {
        let line = serde_json::to_string(inst).expect("instance serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Repository metadata used to pick source repositories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoCandidate {
    pub full_name: String,
    pub stars: u64,
    pub created_at: DateTime<Utc>,
    pub loc: u64,
    pub pr_count: u64,
    pub contributor_count: u64,
}

/// Thresholds for [`repo_filter`]. "More than" bounds are strict, "at least"
/// bounds are inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoPolicy {
    pub created_before: DateTime<Utc>,
    pub stars_more_than: u64,
    pub loc_at_least: u64,
    pub prs_more_than: u64,
    pub contributors_at_least: u64,
}

impl Default for RepoPolicy {
    fn default() -> Self {
        Self {
            created_before: Utc.with_ymd_and_hms(2022, 7, 1, 0, 0, 0).unwrap(),
            stars_more_than: 500,
            loc_at_least: 300,
            prs_more_than: 500,
            contributors_at_least: 100,
        }
    }
}

pub fn repo_filter(c: &RepoCandidate, policy: &RepoPolicy) -> bool {
    c.created_at < policy.created_before
        && c.stars > policy.stars_more_than
        && c.loc >= policy.loc_at_least
        && c.pr_count > policy.prs_more_than
        && c.contributor_count >= policy.contributors_at_least
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LitePolicy {
    /// Upper bound on added + removed lines in the gold patch.
    pub max_lines: usize,
    pub min_words: usize,
}

impl Default for LitePolicy {
    fn default() -> Self {
        Self {
            max_lines: 50,
            min_words: 10,
        }
    }
}

/// Single-file, small-diff, adequately described instances.
pub fn lite_filter(inst: &TaskInstance, policy: &LitePolicy) -> Result<bool, ParseError> {
    let patch = Patch::parse(&inst.gold_patch)?;
    let words = inst.problem_statement.split_whitespace().count();
    Ok(patch.paths().len() == 1
        && patch.edited_lines() <= policy.max_lines
        && words >= policy.min_words)
}
