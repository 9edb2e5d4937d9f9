//! Execution-based instance validation: derive fail-to-pass and pass-to-pass
//! sets by running the candidate tests before and after the gold patch.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::sandbox::{Backend, RunnerConfig, Sandbox, SandboxError};
use crate::task::{Dataset, Split, TaskInstance, TestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationStatus {
    Valid,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoNewPassingTests,
    GoldPatchFailedToApply,
    TestRunError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub instance_id: String,
    pub status: ValidationStatus,
    pub fail_to_pass: BTreeSet<TestId>,
    pub pass_to_pass: BTreeSet<TestId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ValidationOutcome {
    fn rejected(instance_id: &str, reason: RejectReason, detail: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.to_string(),
            status: ValidationStatus::Rejected,
            fail_to_pass: BTreeSet::new(),
            pass_to_pass: BTreeSet::new(),
            reject_reason: Some(reason),
            detail: Some(detail.into()),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.status == ValidationStatus::Valid
    }
}

/// Candidate universe: the record's own test sets plus whatever the runner's
/// discovery command lists once the test patch is applied. Leaves `sb` fresh.
pub fn candidate_tests(
    instance: &TaskInstance,
    sb: &mut Sandbox,
    runner: &RunnerConfig,
) -> Result<BTreeSet<TestId>, SandboxError> {
    let mut out = instance.graded_tests();
    if runner.discover.is_some() {
        sb.apply_patch(&instance.test_patch)?;
        out.extend(sb.discover_tests(runner)?);
        sb.reset()?;
    }
    Ok(out)
}

/// Runs `candidates` at base and after the gold patch (both with the test
/// patch applied) and classifies each test.
pub fn validate_instance(
    instance: &TaskInstance,
    sb: &mut Sandbox,
    candidates: &BTreeSet<TestId>,
    runner: &RunnerConfig,
) -> ValidationOutcome {
    let id = instance.instance_id.as_str();
    let run_error = |e: SandboxError| ValidationOutcome::rejected(id, RejectReason::TestRunError, e.to_string());

    if let Err(e) = sb.reset().and_then(|_| sb.apply_patch(&instance.test_patch)) {
        return run_error(e);
    }
    let before = match sb.run_tests(candidates, runner) {
        Ok(r) => r,
        Err(e) => return run_error(e),
    };
    if let Err(e) = sb.reset().and_then(|_| sb.apply_patch(&instance.test_patch)) {
        return run_error(e);
    }
    if let Err(e) = sb.apply_patch(&instance.gold_patch) {
        return ValidationOutcome::rejected(id, RejectReason::GoldPatchFailedToApply, e.to_string());
    }
    let after = match sb.run_tests(candidates, runner) {
        Ok(r) => r,
        Err(e) => return run_error(e),
    };

    let mut fail_to_pass = BTreeSet::new();
    let mut pass_to_pass = BTreeSet::new();
    for t in candidates {
        match (before.passed(t), after.passed(t)) {
            (false, true) => {
                fail_to_pass.insert(t.clone());
            }
            (true, true) => {
                pass_to_pass.insert(t.clone());
            }
            _ => {}
        }
    }
    if fail_to_pass.is_empty() {
        return ValidationOutcome {
            pass_to_pass,
            ..ValidationOutcome::rejected(
                id,
                RejectReason::NoNewPassingTests,
                "the gold patch makes no failing test pass",
            )
        };
    }
    ValidationOutcome {
        instance_id: id.to_string(),
        status: ValidationStatus::Valid,
        fail_to_pass,
        pass_to_pass,
        reject_reason: None,
        detail: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub outcomes: Vec<ValidationOutcome>,
    pub rejected_by_reason: BTreeMap<RejectReason, usize>,
}

impl ValidationReport {
    pub fn rejections(&self) -> impl Iterator<Item = &ValidationOutcome> {
        self.outcomes.iter().filter(|o| !o.is_valid())
    }

    /// One JSON object per line: `{instance_id, status, reject_reason}`.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            instance_id: &'a str,
            status: ValidationStatus,
            reject_reason: Option<RejectReason>,
        }
        let mut out = String::new();
        for o in self.rejections() {
            let row = Row {
                instance_id: &o.instance_id,
                status: o.status,
                reject_reason: o.reject_reason,
            };
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

fn validate_one(inst: &TaskInstance, backend: &dyn Backend, runner: &RunnerConfig) -> ValidationOutcome {
    let mut sb = match backend.open(inst) {
        Ok(sb) => sb,
        Err(e) => {
            return ValidationOutcome::rejected(&inst.instance_id, RejectReason::TestRunError, e.to_string())
        }
    };
    let outcome = match candidate_tests(inst, &mut sb, runner) {
        Ok(c) => validate_instance(inst, &mut sb, &c, runner),
        Err(e) => ValidationOutcome::rejected(&inst.instance_id, RejectReason::TestRunError, e.to_string()),
    };
    sb.close();
    outcome
}

/// Validates every instance on `parallelism` workers, each with its own
/// sandbox. Per-instance failures become rejections. The valid dataset keeps
/// input order and carries the derived test sets.
pub fn validate_dataset(
    ds: &Dataset,
    backend: &dyn Backend,
    runner: &RunnerConfig,
    parallelism: usize,
) -> (Dataset, ValidationReport) {
    let n = ds.instances.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ValidationOutcome>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1).min(n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(inst) = ds.instances.get(i) else { break };
                let outcome = validate_one(inst, backend, runner);
                tracing::debug!(instance = %inst.instance_id, status = ?outcome.status, "validated");
                slots.lock().expect("collector lock")[i] = Some(outcome);
            });
        }
    });
    let outcomes: Vec<ValidationOutcome> = slots
        .into_inner()
        .expect("collector lock")
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect();

    let mut rejected_by_reason = BTreeMap::new();
    let mut valid = Vec::new();
    for (inst, o) in ds.instances.iter().zip(&outcomes) {
        if o.is_valid() {
            valid.push(TaskInstance {
                fail_to_pass: o.fail_to_pass.clone(),
                pass_to_pass: o.pass_to_pass.clone(),
                ..inst.clone()
            });
        } else if let Some(r) = o.reject_reason {
            *rejected_by_reason.entry(r).or_insert(0) += 1;
        }
    }
    let valid_ds = Dataset {
        name: ds.name.clone(),
        split: if ds.split == Split::Lite { Split::Lite } else { Split::Full },
        instances: valid,
    };
    (
        valid_ds,
        ValidationReport {
            outcomes,
            rejected_by_reason,
        },
    )
}

/// A way to read a version label out of a snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum VersionProbe {
    /// Match `pattern` against a file; capture group 1 (or the whole match)
    /// is the label.
    File { path: String, pattern: String },
    /// Match `pattern` against a command's stdout.
    Command { argv: Vec<String>, pattern: String },
}

fn extract(pattern: &str, text: &str) -> Option<String> {
    let re = Regex::new(pattern).ok()?;
    let caps = re.captures(text)?;
    let m = caps.get(1).or_else(|| caps.get(0))?;
    let label = m.as_str().trim();
    (!label.is_empty()).then(|| label.to_string())
}

/// First probe that yields a label wins; "unknown" when none does.
pub fn assign_version(sb: &mut Sandbox, probes: &[VersionProbe]) -> String {
    for probe in probes {
        let label = match probe {
            VersionProbe::File { path, pattern } => {
                sb.read_file(path).ok().and_then(|t| extract(pattern, &t))
            }
            VersionProbe::Command { argv, pattern } => sb
                .run_command(argv, Duration::from_secs(30), &BTreeMap::new())
                .ok()
                .filter(|r| r.success())
                .and_then(|r| extract(pattern, &r.stdout)),
        };
        if let Some(l) = label {
            return l;
        }
    }
    "unknown".to_string()
}
