use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use super::agent::AgentSpec;
use super::episode::run_rollout;
use super::tokens::TokenEstimator;
use super::{RolloutPolicy, Termination, Trajectory};
use crate::sandbox::Backend;
use crate::seed;
use crate::store::{ManifestEntry, RunManifest, Store, StoreError};
use crate::task::{Dataset, TaskInstance};

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub run_id: String,
    /// Recorded in the manifest, usually the dataset path.
    pub dataset_ref: String,
    pub seed: u64,
    pub parallelism: usize,
    /// Run at most this many new rollouts, then stop as if interrupted.
    pub limit: Option<usize>,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("run `{run_id}` already exists with a different {field}")]
    Mismatch { run_id: String, field: &'static str },
}

pub fn trajectory_id(run_id: &str, instance_id: &str, attempt: usize) -> String {
    format!("{run_id}__{instance_id}__{attempt}")
}

struct Job<'a> {
    index: usize,
    instance: &'a TaskInstance,
    attempt: usize,
}

fn failed_trajectory(
    inst: &TaskInstance,
    id: String,
    attempt: usize,
    policy: &RolloutPolicy,
    tag: String,
    error: String,
) -> Trajectory {
    Trajectory {
        trajectory_id: id,
        instance_id: inst.instance_id.clone(),
        repo: inst.repo.clone(),
        problem_statement: inst.problem_statement.clone(),
        attempt,
        policy_tag: tag,
        temperature: policy.temperature_for(attempt),
        policy: policy.clone(),
        steps: Vec::new(),
        final_patch: String::new(),
        resolved: None,
        empty_patch: true,
        stuck_in_loop: false,
        num_turns: 0,
        num_tokens: 0,
        termination: Termination::EnvironmentError,
        error: Some(error),
    }
}

fn run_job(
    job: &Job,
    spec: &AgentSpec,
    policy: &RolloutPolicy,
    backend: &dyn Backend,
    opts: &BatchOptions,
    estimator: &dyn TokenEstimator,
    attempts: usize,
) -> Trajectory {
    let inst = job.instance;
    let id = trajectory_id(&opts.run_id, &inst.instance_id, job.attempt);
    let job_seed = seed::derive(opts.seed, (job.index * attempts + job.attempt) as u64);
    let mut sb = match backend.open(inst) {
        Ok(sb) => sb,
        Err(e) => return failed_trajectory(inst, id, job.attempt, policy, spec.to_string(), e.to_string()),
    };
    let mut agent = match spec.start(inst, job_seed) {
        Ok(a) => a,
        Err(e) => {
            sb.close();
            return failed_trajectory(inst, id, job.attempt, policy, spec.to_string(), e.to_string());
        }
    };
    let t = run_rollout(agent.as_mut(), inst, &mut sb, policy, &id, job.attempt, estimator);
    sb.close();
    t
}

/// Runs `attempts_per_instance` rollouts for every instance on
/// `opts.parallelism` workers and records them under `opts.run_id`.
///
/// Attempts already listed in an existing manifest are skipped. Each
/// trajectory is committed before its manifest entry, and the manifest is
/// rewritten after every completion, so an interrupted batch can be resumed.
pub fn run_batch(
    spec: &AgentSpec,
    dataset: &Dataset,
    policy: &RolloutPolicy,
    backend: &dyn Backend,
    store: &Store,
    opts: &BatchOptions,
    estimator: &dyn TokenEstimator,
) -> Result<RunManifest, BatchError> {
    policy.check().map_err(BatchError::Policy)?;
    let _lock = store.lock_run(&opts.run_id)?;

    let manifest = if store.has_manifest(&opts.run_id) {
        let m = store.read_manifest(&opts.run_id)?;
        let mismatch = |field| BatchError::Mismatch {
            run_id: opts.run_id.clone(),
            field,
        };
        if m.policy != *policy {
            return Err(mismatch("policy"));
        }
        if m.agent != spec.to_string() {
            return Err(mismatch("agent"));
        }
        if m.seed != opts.seed {
            return Err(mismatch("seed"));
        }
        m
    } else {
        RunManifest {
            run_id: opts.run_id.clone(),
            dataset: opts.dataset_ref.clone(),
            policy: policy.clone(),
            agent: spec.to_string(),
            seed: opts.seed,
            entries: Vec::new(),
        }
    };

    let attempts = policy.attempts_per_instance;
    let mut jobs: Vec<Job> = Vec::new();
    for (index, instance) in dataset.instances.iter().enumerate() {
        for attempt in 0..attempts {
            if manifest.entry(&instance.instance_id, attempt).is_none() {
                jobs.push(Job {
                    index,
                    instance,
                    attempt,
                });
            }
        }
    }
    if let Some(limit) = opts.limit {
        jobs.truncate(limit);
    }
    store.write_manifest(&manifest)?;

    let order: HashMap<&str, usize> = dataset
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (inst.instance_id.as_str(), i))
        .collect();
    let next = AtomicUsize::new(0);
    let collector = Mutex::new((manifest, None::<StoreError>));

    std::thread::scope(|s| {
        for _ in 0..opts.parallelism.max(1).min(jobs.len().max(1)) {
            s.spawn(|| loop {
                if collector.lock().expect("collector").1.is_some() {
                    break;
                }
                let Some(job) = jobs.get(next.fetch_add(1, Ordering::Relaxed)) else {
                    break;
                };
                let t = run_job(job, spec, policy, backend, opts, estimator, attempts);
                tracing::info!(trajectory = %t.trajectory_id, termination = ?t.termination, "rollout done");
                let mut guard = collector.lock().expect("collector");
                let (m, err) = &mut *guard;
                if err.is_some() {
                    break;
                }
                if let Err(e) = store.write_trajectory(&opts.run_id, &t) {
                    *err = Some(e);
                    break;
                }
                m.entries.push(ManifestEntry {
                    instance_id: t.instance_id.clone(),
                    attempt: t.attempt,
                    trajectory_id: t.trajectory_id.clone(),
                    termination: t.termination,
                    resolved: None,
                    note: None,
                });
                m.entries.sort_by(|a, b| {
                    let ka = order.get(a.instance_id.as_str()).copied().unwrap_or(usize::MAX);
                    let kb = order.get(b.instance_id.as_str()).copied().unwrap_or(usize::MAX);
                    (ka, &a.instance_id, a.attempt).cmp(&(kb, &b.instance_id, b.attempt))
                });
                if let Err(e) = store.write_manifest(m) {
                    *err = Some(e);
                    break;
                }
            });
        }
    });

    let (manifest, err) = collector.into_inner().expect("collector");
    match err {
        Some(e) => Err(e.into()),
        None => Ok(manifest),
    }
}
