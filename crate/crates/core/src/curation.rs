//! Dataset construction from stored trajectories: success filtering,
//! per-instance capping, label balancing, source mixing, subsetting, and the
//! fine-tuning and verifier exports.
//!
//! Every step is a pure function of its input records and seed. Outputs keep
//! the relative order of their inputs.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::render::{
    context_from_trajectory, render_action, render_interleaved_capped, render_parsed_context, DocStyle, Label,
};
use crate::rollout::{TokenEstimator, Trajectory};
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("record `{0}` has no resolved flag")]
    UnresolvedMissing(String),
    #[error("insufficient failures: need {need}, have {have}")]
    InsufficientFailures { need: usize, have: usize },
    #[error("trajectory id `{0}` appears in more than one set")]
    IdCollision(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Metadata of one stored trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory_id: String,
    pub instance_id: String,
    pub repo: String,
    pub policy_tag: String,
    pub resolved: Option<bool>,
    pub num_turns: usize,
    pub num_tokens: usize,
    pub temperature: f64,
    /// Run the trajectory is stored under.
    #[serde(default)]
    pub run_id: String,
    /// Name of the plan input it came from.
    #[serde(default)]
    pub source: String,
}

impl TrajectoryRecord {
    pub fn from_trajectory(t: &Trajectory, run_id: &str, source: &str) -> Self {
        Self {
            trajectory_id: t.trajectory_id.clone(),
            instance_id: t.instance_id.clone(),
            repo: t.repo.clone(),
            policy_tag: t.policy_tag.clone(),
            resolved: t.resolved,
            num_turns: t.num_turns,
            num_tokens: t.num_tokens,
            temperature: t.temperature,
            run_id: run_id.to_string(),
            source: source.to_string(),
        }
    }

    fn label(&self) -> Result<bool, CurationError> {
        self.resolved
            .ok_or_else(|| CurationError::UnresolvedMissing(self.trajectory_id.clone()))
    }
}

pub fn filter_success(records: &[TrajectoryRecord]) -> Result<Vec<TrajectoryRecord>, CurationError> {
    let mut out = Vec::new();
    for r in records {
        if r.label()? {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Keeps at most `c` records per instance, fewest turns first, then smallest
/// trajectory id. `None` means no cap.
pub fn cap_per_instance(records: &[TrajectoryRecord], c: Option<usize>) -> Vec<TrajectoryRecord> {
    let Some(c) = c else {
        return records.to_vec();
    };
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(&r.instance_id).or_default().push(i);
    }
    let mut keep = vec![false; records.len()];
    for idx in groups.values_mut() {
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (&records[a], &records[b]);
            (ra.num_turns, &ra.trajectory_id).cmp(&(rb.num_turns, &rb.trajectory_id))
        });
        for &i in idx.iter().take(c) {
            keep[i] = true;
        }
    }
    records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect()
}

/// `k` of `n` indices drawn uniformly without replacement, ascending.
fn sample_sorted(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// All records of the smaller label plus an equal-size seeded sample of the
/// other label. With `strict`, fewer failures than successes is an error.
/// Successes come first, then failures.
pub fn balance_labels(
    records: &[TrajectoryRecord],
    seed: u64,
    strict: bool,
) -> Result<Vec<TrajectoryRecord>, CurationError> {
    let mut succ = Vec::new();
    let mut fail = Vec::new();
    for r in records {
        if r.label()? {
            succ.push(r);
        } else {
            fail.push(r);
        }
    }
    if strict && fail.len() < succ.len() {
        return Err(CurationError::InsufficientFailures {
            need: succ.len(),
            have: fail.len(),
        });
    }
    let n = succ.len().min(fail.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, set: &[&TrajectoryRecord]| -> Vec<TrajectoryRecord> {
        sample_sorted(rng, set.len(), n)
            .into_iter()
            .map(|i| set[i].clone())
            .collect()
    };
    let mut out = pick(&mut rng, &succ);
    out.extend(pick(&mut rng, &fail));
    Ok(out)
}

/// Concatenates sets whose trajectory ids are pairwise disjoint.
pub fn mix_policy_sets(sets: &[Vec<TrajectoryRecord>]) -> Result<Vec<TrajectoryRecord>, CurationError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for set in sets {
        for r in set {
            if !seen.insert(r.trajectory_id.clone()) {
                return Err(CurationError::IdCollision(r.trajectory_id.clone()));
            }
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// One record per instance, chosen uniformly by `seed`.
pub fn dedup_by_instance(records: &[TrajectoryRecord], seed: u64) -> Vec<TrajectoryRecord> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let g = *slot.entry(&r.instance_id).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = groups
        .iter()
        .map(|g| if g.len() == 1 { g[0] } else { g[rng.random_range(0..g.len())] })
        .collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i].clone()).collect()
}

fn check_frac(frac: f64) -> Result<(), CurationError> {
    if (0.0..=1.0).contains(&frac) {
        Ok(())
    } else {
        Err(CurationError::BadParam(format!("fraction {frac} outside [0, 1]")))
    }
}

/// A seeded uniform sample of `round(frac * n)` records.
pub fn subset_random(
    records: &[TrajectoryRecord],
    frac: f64,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>, CurationError> {
    check_frac(frac)?;
    let k = (frac * records.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_sorted(&mut rng, records.len(), k)
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}

/// Whole repositories in alphabetical order until the cumulative record
/// count first reaches `frac * total`.
pub fn subset_by_repo(records: &[TrajectoryRecord], frac: f64) -> Result<Vec<TrajectoryRecord>, CurationError> {
    check_frac(frac)?;
    if frac == 0.0 {
        return Ok(Vec::new());
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(&r.repo).or_default() += 1;
    }
    let target = frac * records.len() as f64;
    let mut chosen = HashSet::new();
    let mut cum = 0usize;
    for (repo, n) in counts {
        chosen.insert(repo);
        cum += n;
        if cum as f64 >= target {
            break;
        }
    }
    Ok(records
        .iter()
        .filter(|r| chosen.contains(r.repo.as_str()))
        .cloned()
        .collect())
}

pub fn token_limit(records: &[TrajectoryRecord], max: usize) -> Vec<TrajectoryRecord> {
    records.iter().filter(|r| r.num_tokens <= max).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    FilterSuccess,
    /// `c: null` means uncapped.
    Cap { c: Option<usize> },
    Balance {
        seed: u64,
        #[serde(default)]
        strict: bool,
    },
    /// Appends the outputs of the sub-plans to the current records.
    Mix { sets: Vec<SubPlan> },
    Dedup { seed: u64 },
    SubsetRandom { frac: f64, seed: u64 },
    SubsetByRepo { frac: f64 },
    TokenLimit { max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubPlan {
    pub input: String,
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExportSpec {
    Finetune {
        #[serde(default)]
        token_limit: Option<usize>,
    },
    Verifier {
        style: DocStyle,
        /// Elide middle steps of interleaved documents beyond this many tokens.
        #[serde(default)]
        token_cap: Option<usize>,
    },
}

impl Default for ExportSpec {
    fn default() -> Self {
        ExportSpec::Finetune { token_limit: None }
    }
}

/// A declarative, replayable curation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationPlan {
    /// Starting records; without it the pipeline starts empty (for `mix`).
    #[serde(default)]
    pub input: Option<String>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub export: ExportSpec,
}

impl CurationPlan {
    pub fn parse(text: &str) -> Result<Self, CurationError> {
        serde_json::from_str(text).map_err(|e| CurationError::BadParam(e.to_string()))
    }

    /// SHA-256 of the plan's canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("plan serializes")))
    }

    pub fn seeds(&self) -> Vec<u64> {
        fn walk(steps: &[Step], out: &mut Vec<u64>) {
            for s in steps {
                match s {
                    Step::Balance { seed, .. } | Step::Dedup { seed } | Step::SubsetRandom { seed, .. } => {
                        out.push(*seed)
                    }
                    Step::Mix { sets } => sets.iter().for_each(|p| walk(&p.steps, out)),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.steps, &mut out);
        out
    }

    /// Names of all inputs the plan reads.
    pub fn inputs(&self) -> Vec<String> {
        fn walk(steps: &[Step], out: &mut Vec<String>) {
            for s in steps {
                if let Step::Mix { sets } = s {
                    for p in sets {
                        out.push(p.input.clone());
                        walk(&p.steps, out);
                    }
                }
            }
        }
        let mut out: Vec<String> = self.input.iter().cloned().collect();
        walk(&self.steps, &mut out);
        out.sort();
        out.dedup();
        out
    }

    pub fn replay(&self, inputs: &BTreeMap<String, Vec<TrajectoryRecord>>) -> Result<Vec<TrajectoryRecord>, CurationError> {
        let start = match &self.input {
            Some(name) => lookup(inputs, name)?.clone(),
            None => Vec::new(),
        };
        run_steps(start, &self.steps, inputs)
    }
}

fn lookup<'a>(
    inputs: &'a BTreeMap<String, Vec<TrajectoryRecord>>,
    name: &str,
) -> Result<&'a Vec<TrajectoryRecord>, CurationError> {
    inputs
        .get(name)
        .ok_or_else(|| CurationError::UnknownInput(name.to_string()))
}

fn run_steps(
    mut records: Vec<TrajectoryRecord>,
    steps: &[Step],
    inputs: &BTreeMap<String, Vec<TrajectoryRecord>>,
) -> Result<Vec<TrajectoryRecord>, CurationError> {
    for step in steps {
        records = match step {
            Step::FilterSuccess => filter_success(&records)?,
            Step::Cap { c } => cap_per_instance(&records, *c),
            Step::Balance { seed, strict } => balance_labels(&records, *seed, *strict)?,
            Step::Mix { sets } => {
                let mut all = vec![records];
                for p in sets {
                    all.push(run_steps(lookup(inputs, &p.input)?.clone(), &p.steps, inputs)?);
                }
                mix_policy_sets(&all)?
            }
            Step::Dedup { seed } => dedup_by_instance(&records, *seed),
            Step::SubsetRandom { frac, seed } => subset_random(&records, *frac, *seed)?,
            Step::SubsetByRepo { frac } => subset_by_repo(&records, *frac)?,
            Step::TokenLimit { max } => token_limit(&records, *max),
        };
    }
    Ok(records)
}

pub type Loader<'a> = dyn Fn(&TrajectoryRecord) -> Result<Trajectory, CurationError> + 'a;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub instance_id: String,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub written: usize,
    /// Trajectories left out for exceeding the token limit.
    pub dropped_over_limit: Vec<String>,
    pub by_label: BTreeMap<String, usize>,
}

pub fn finetune_example(t: &Trajectory) -> FinetuneExample {
    let mut messages = Vec::with_capacity(2 * t.steps.len());
    for s in &t.steps {
        messages.push(Message {
            role: "user".into(),
            content: s.observation.content.clone(),
        });
        messages.push(Message {
            role: "assistant".into(),
            content: render_action(&s.action),
        });
    }
    FinetuneExample {
        instance_id: t.instance_id.clone(),
        messages,
    }
}

/// JSON lines of chat examples; trajectories over `limit` tokens are dropped
/// and listed in the report.
pub fn export_finetune(
    records: &[TrajectoryRecord],
    load: &Loader,
    limit: Option<usize>,
) -> Result<(String, ExportReport), CurationError> {
    let mut out = String::new();
    let mut report = ExportReport::default();
    for r in records {
        let t = load(r)?;
        if limit.is_some_and(|l| t.num_tokens > l) {
            report.dropped_over_limit.push(t.trajectory_id.clone());
            continue;
        }
        out.push_str(&serde_json::to_string(&finetune_example(&t)).expect("serializes"));
        out.push('\n');
        report.written += 1;
    }
    Ok((out, report))
}

/// JSON lines of labeled verifier documents.
pub fn export_verifier(
    records: &[TrajectoryRecord],
    load: &Loader,
    style: DocStyle,
    token_cap: Option<usize>,
    estimator: &dyn TokenEstimator,
) -> Result<(String, ExportReport), CurationError> {
    let mut out = String::new();
    let mut report = ExportReport::default();
    for r in records {
        let label = Label::from_resolved(r.label()?);
        let t = load(r)?;
        let doc = match style {
            DocStyle::Interleaved => render_interleaved_capped(
                &t,
                &t.final_patch,
                Some(label),
                token_cap.unwrap_or(usize::MAX),
                estimator,
            ),
            DocStyle::ParsedContext => render_parsed_context(
                &t.trajectory_id,
                &t.problem_statement,
                &context_from_trajectory(&t),
                &t.final_patch,
                Some(label),
            ),
        };
        out.push_str(&serde_json::to_string(&doc).expect("serializes"));
        out.push('\n');
        report.written += 1;
        *report.by_label.entry(label.token().trim_matches(['<', '>']).to_string()).or_default() += 1;
    }
    Ok((out, report))
}

/// Everything needed to replay an export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub plan_hash: String,
    pub plan: CurationPlan,
    pub seeds: Vec<u64>,
    /// Plan input name to run id.
    pub inputs: BTreeMap<String, String>,
    pub export_sha256: String,
    pub report: ExportReport,
}

impl Provenance {
    pub fn new(plan: &CurationPlan, inputs: BTreeMap<String, String>, export: &str, report: ExportReport) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            plan_hash: plan.hash(),
            plan: plan.clone(),
            seeds: plan.seeds(),
            inputs,
            export_sha256: hex::encode(Sha256::digest(export.as_bytes())),
            report,
        }
    }
}

/// Runs `plan` and renders its export.
pub fn curate(
    plan: &CurationPlan,
    inputs: &BTreeMap<String, Vec<TrajectoryRecord>>,
    load: &Loader,
    estimator: &dyn TokenEstimator,
) -> Result<(String, ExportReport), CurationError> {
    let records = plan.replay(inputs)?;
    match &plan.export {
        ExportSpec::Finetune { token_limit } => export_finetune(&records, load, *token_limit),
        ExportSpec::Verifier { style, token_cap } => export_verifier(&records, load, *style, *token_cap, estimator),
    }
}
