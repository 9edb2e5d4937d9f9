//! Test-based resolution and the verifier's normalized YES/NO reward.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::rollout::Trajectory;
use crate::sandbox::{Backend, RunnerConfig, Sandbox, SandboxError};
use crate::store::{Store, StoreError};
use crate::task::{Dataset, TaskInstance, TestId};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("undefined score: both logprobs are -inf")]
    UndefinedScore,
    #[error("invalid logprob {0}")]
    InvalidLogprob(f64),
    #[error("invalid reward {0}")]
    InvalidReward(f64),
    #[error("no candidates to rerank")]
    EmptyCandidates,
    #[error("line {line}: {message}")]
    ScoreFormat { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionResult {
    pub instance_id: String,
    pub trajectory_id: String,
    pub resolved: bool,
    pub f2p_passed: usize,
    pub f2p_total: usize,
    pub p2p_passed: usize,
    pub p2p_total: usize,
    /// Set when a patch did not apply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn count_passing(report: &crate::sandbox::TestReport, tests: &BTreeSet<TestId>) -> usize {
    tests
        .iter()
        .filter(|t| report.results.get(*t).is_some_and(|o| o.is_pass()))
        .count()
}

/// Grades `traj` on a fresh sandbox: applies the test patch and the
/// trajectory's final patch, then runs FAIL_TO_PASS and PASS_TO_PASS.
/// A patch that does not apply grades as unresolved with zero passes.
/// The sandbox is left dirty.
pub fn evaluate_resolution(
    instance: &TaskInstance,
    traj: &Trajectory,
    sb: &mut Sandbox,
    runner: &RunnerConfig,
) -> Result<ResolutionResult, SandboxError> {
    let mut result = ResolutionResult {
        instance_id: instance.instance_id.clone(),
        trajectory_id: traj.trajectory_id.clone(),
        resolved: false,
        f2p_passed: 0,
        f2p_total: instance.fail_to_pass.len(),
        p2p_passed: 0,
        p2p_total: instance.pass_to_pass.len(),
        note: None,
    };
    for (what, patch) in [("test patch", &instance.test_patch), ("final patch", &traj.final_patch)] {
        match sb.apply_patch(patch) {
            Ok(_) => {}
            Err(SandboxError::Apply(e)) => {
                result.note = Some(format!("{what} failed to apply: {e}"));
                return Ok(result);
            }
            Err(e) => return Err(e),
        }
    }
    let report = sb.run_tests(&instance.graded_tests(), runner)?;
    result.f2p_passed = count_passing(&report, &instance.fail_to_pass);
    result.p2p_passed = count_passing(&report, &instance.pass_to_pass);
    result.resolved = result.f2p_total >= 1
        && result.f2p_passed == result.f2p_total
        && result.p2p_passed == result.p2p_total;
    Ok(result)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("instance `{0}` of the run is not in the dataset")]
    UnknownInstance(String),
}

/// Outcome of grading a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEvaluation {
    /// Graded entries in manifest order.
    pub results: Vec<ResolutionResult>,
    /// Entries whose sandbox could not be prepared, with the reason. They
    /// are recorded as unresolved.
    pub errors: Vec<(String, String)>,
    /// Entries skipped because they already had a verdict.
    pub skipped: usize,
}

/// Grades the trajectories of a stored run that have no verdict yet (all of
/// them with `regrade`) and records the verdict in both the trajectory
/// files and the manifest.
pub fn evaluate_run(
    store: &Store,
    run_id: &str,
    dataset: &Dataset,
    backend: &dyn Backend,
    runner: &RunnerConfig,
    parallelism: usize,
    regrade: bool,
) -> Result<RunEvaluation, EvalError> {
    let _lock = store.lock_run(run_id)?;
    let mut manifest = store.read_manifest(run_id)?;
    for e in &manifest.entries {
        if dataset.get(&e.instance_id).is_none() {
            return Err(EvalError::UnknownInstance(e.instance_id.clone()));
        }
    }

    let todo: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| regrade || manifest.entries[i].resolved.is_none())
        .collect();
    let n = todo.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ResolutionResult, String>>>> = Mutex::new(vec![None; n]);
    let store_err: Mutex<Option<StoreError>> = Mutex::new(None);
    let entries = &manifest.entries;
    std::thread::scope(|scope| {
        for _ in 0..parallelism.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let entry = &entries[todo[i]];
                let inst = dataset.get(&entry.instance_id).expect("checked above");
                let mut traj = match store.read_trajectory(run_id, &entry.trajectory_id) {
                    Ok(t) => t,
                    Err(e) => {
                        store_err.lock().unwrap().get_or_insert(e);
                        break;
                    }
                };
                let graded = backend
                    .open(inst)
                    .and_then(|mut sb| evaluate_resolution(inst, &traj, &mut sb, runner))
                    .map_err(|e| e.to_string());
                traj.resolved = Some(graded.as_ref().is_ok_and(|r| r.resolved));
                if let Err(e) = store.write_trajectory(run_id, &traj) {
                    store_err.lock().unwrap().get_or_insert(e);
                    break;
                }
                slots.lock().unwrap()[i] = Some(graded);
            });
        }
    });
    if let Some(e) = store_err.into_inner().unwrap() {
        return Err(e.into());
    }

    let mut out = RunEvaluation {
        skipped: manifest.entries.len() - n,
        ..Default::default()
    };
    for (&i, slot) in todo.iter().zip(slots.into_inner().unwrap()) {
        let entry = &mut manifest.entries[i];
        match slot.expect("every entry graded") {
            Ok(r) => {
                entry.resolved = Some(r.resolved);
                entry.note = r.note.clone();
                out.results.push(r);
            }
            Err(e) => {
                entry.resolved = Some(false);
                entry.note = Some(e.clone());
                out.errors.push((entry.trajectory_id.clone(), e));
            }
        }
    }
    store.write_manifest(&manifest)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub trajectory_id: String,
    pub l_yes: f64,
    pub l_no: f64,
    pub reward: f64,
}

/// `exp(l_yes) / (exp(l_yes) + exp(l_no))` as a logistic of the difference.
/// Either logprob may be `-inf`; both at once is undefined.
pub fn verifier_reward(l_yes: f64, l_no: f64) -> Result<f64, RewardError> {
    for l in [l_yes, l_no] {
        if l.is_nan() || l == f64::INFINITY {
            return Err(RewardError::InvalidLogprob(l));
        }
    }
    match (l_yes == f64::NEG_INFINITY, l_no == f64::NEG_INFINITY) {
        (true, true) => return Err(RewardError::UndefinedScore),
        (false, true) => return Ok(1.0),
        (true, false) => return Ok(0.0),
        _ => {}
    }
    let d = l_no - l_yes;
    if d > 0.0 {
        let e = (-d).exp();
        Ok(e / (1.0 + e))
    } else {
        Ok(1.0 / (1.0 + d.exp()))
    }
}

impl VerifierScore {
    pub fn new(trajectory_id: impl Into<String>, l_yes: f64, l_no: f64) -> Result<Self, RewardError> {
        Ok(Self {
            trajectory_id: trajectory_id.into(),
            l_yes,
            l_no,
            reward: verifier_reward(l_yes, l_no)?,
        })
    }
}

/// Highest reward wins; equal rewards go to the smallest id.
pub fn rerank_best<S: AsRef<str>>(candidates: &[(S, f64)]) -> Result<&str, RewardError> {
    let mut best: Option<(&str, f64)> = None;
    for (id, r) in candidates {
        if r.is_nan() {
            return Err(RewardError::InvalidReward(*r));
        }
        let id = id.as_ref();
        best = match best {
            Some((bid, br)) if br > *r || (br == *r && bid <= id) => Some((bid, br)),
            _ => Some((id, *r)),
        };
    }
    best.map(|(id, _)| id).ok_or(RewardError::EmptyCandidates)
}

/// One line of a score file. Logprobs may be `null` or `"-inf"` for
/// negative infinity, which JSON cannot spell as a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub trajectory_id: String,
    #[serde(deserialize_with = "logprob")]
    pub l_yes: f64,
    #[serde(deserialize_with = "logprob")]
    pub l_no: f64,
}

impl ScoreRecord {
    pub fn score(&self) -> Result<VerifierScore, RewardError> {
        VerifierScore::new(self.trajectory_id.clone(), self.l_yes, self.l_no)
    }
}

fn logprob<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
        Null(()),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Null(()) => Ok(f64::NEG_INFINITY),
        Raw::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            other => other
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("bad logprob `{s}`"))),
        },
    }
}

/// Parses a JSON-lines score file. Blank lines are skipped.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>, RewardError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RewardError::ScoreFormat {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
