use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use gym_core::curation::{curate, CurationError, CurationPlan, Provenance, TrajectoryRecord};
use gym_core::metrics::{build_report, EstimatorMode, MetricError, RunOutcomes};
use gym_core::reward::{evaluate_run, parse_scores, rerank_best, VerifierScore};
use gym_core::rollout::{run_batch, AgentSpec, BatchOptions, RolloutPolicy, Trajectory, WhitespaceEstimator};
use gym_core::store::{write_atomic, write_json, Store};
use gym_core::task::{load_dataset, save_dataset, Dataset, Split};
use gym_core::validation::validate_dataset;
use serde::Serialize;

use crate::config::Config;

/// Exit status 1 for an empty or degenerate result, 2 for everything else.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self { code: 2, error: e.into() }
    }
}

pub type CliResult = Result<(), CliError>;

fn empty(msg: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        error: anyhow!(msg.into()),
    }
}

pub struct Ctx {
    pub config: Config,
    pub store: Store,
}

fn load(path: &Path, split: Split) -> anyhow::Result<Dataset> {
    load_dataset(path, split).with_context(|| format!("loading dataset {}", path.display()))
}

pub struct ValidateArgs {
    pub dataset: PathBuf,
    pub split: Split,
    pub parallelism: usize,
    pub name: Option<String>,
}

pub fn validate(ctx: &Ctx, a: ValidateArgs) -> CliResult {
    let ds = load(&a.dataset, a.split)?;
    let backend = ctx.config.backend_for(&a.dataset).build();
    let (valid, report) = validate_dataset(&ds, backend.as_ref(), &ctx.config.runner(), a.parallelism);
    let name = a.name.unwrap_or_else(|| ds.name.clone());
    let dir = ctx.store.datasets_dir();
    let valid_path = dir.join(format!("{name}.valid.jsonl"));
    save_dataset(&valid_path, &valid)?;
    let report_path = dir.join(format!("{name}.rejections.jsonl"));
    write_atomic(&report_path, report.to_jsonl().as_bytes())?;
    println!(
        "{} of {} instances valid; wrote {} and {}",
        valid.instances.len(),
        ds.instances.len(),
        valid_path.display(),
        report_path.display()
    );
    for (reason, n) in &report.rejected_by_reason {
        println!("  rejected {reason:?}: {n}");
    }
    if valid.instances.is_empty() {
        return Err(empty("no valid instances"));
    }
    Ok(())
}

pub struct PolicyFlags {
    pub max_turns: Option<usize>,
    pub context_budget: Option<usize>,
    pub temperature: Option<f64>,
    pub attempts: Option<usize>,
    pub first_attempt_greedy: bool,
    pub stop_on_loop: bool,
    pub observation_cap: Option<usize>,
}

impl PolicyFlags {
    pub fn apply(&self, mut p: RolloutPolicy) -> RolloutPolicy {
        if let Some(v) = self.max_turns {
            p.max_turns = v;
        }
        if let Some(v) = self.context_budget {
            p.context_budget = v;
        }
        if let Some(v) = self.temperature {
            p.temperature = v;
        }
        if let Some(v) = self.attempts {
            p.attempts_per_instance = v;
        }
        if let Some(v) = self.observation_cap {
            p.observation_cap = v;
        }
        p.first_attempt_greedy |= self.first_attempt_greedy;
        p.stop_on_loop |= self.stop_on_loop;
        p
    }
}

pub struct RolloutArgs {
    pub dataset: PathBuf,
    pub split: Split,
    pub agent: String,
    pub run_id: String,
    pub seed: u64,
    pub parallelism: usize,
    pub limit: Option<usize>,
    pub policy: PolicyFlags,
}

pub fn rollout(ctx: &Ctx, a: RolloutArgs) -> CliResult {
    let spec = AgentSpec::parse(&a.agent)?;
    spec.preflight().context("agent failed to start")?;
    let ds = load(&a.dataset, a.split)?;
    let policy = a.policy.apply(ctx.config.policy()?);
    let before = if ctx.store.has_manifest(&a.run_id) {
        ctx.store.read_manifest(&a.run_id)?.entries.len()
    } else {
        0
    };
    let backend = ctx.config.backend_for(&a.dataset).build();
    let opts = BatchOptions {
        run_id: a.run_id.clone(),
        dataset_ref: fs::canonicalize(&a.dataset).unwrap_or(a.dataset.clone()).display().to_string(),
        seed: a.seed,
        parallelism: a.parallelism,
        limit: a.limit,
    };
    let m = run_batch(
        &spec,
        &ds,
        &policy,
        backend.as_ref(),
        &ctx.store,
        &opts,
        &WhitespaceEstimator::default(),
    )?;
    println!(
        "run {}: {} trajectories ({} new) in {}",
        m.run_id,
        m.entries.len(),
        m.entries.len() - before,
        ctx.store.run_dir(&m.run_id).display()
    );
    if m.entries.is_empty() {
        return Err(empty("no trajectories"));
    }
    Ok(())
}

pub struct EvaluateArgs {
    pub run_id: String,
    pub dataset: Option<PathBuf>,
    pub split: Split,
    pub parallelism: usize,
    pub regrade: bool,
}

pub fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> CliResult {
    let m = ctx.store.read_manifest(&a.run_id)?;
    let path = a.dataset.unwrap_or_else(|| PathBuf::from(&m.dataset));
    let ds = load(&path, a.split)?;
    let backend = ctx.config.backend_for(&path).build();
    let eval = evaluate_run(
        &ctx.store,
        &a.run_id,
        &ds,
        backend.as_ref(),
        &ctx.config.runner(),
        a.parallelism,
        a.regrade,
    )?;
    let m = ctx.store.read_manifest(&a.run_id)?;
    let resolved = m.entries.iter().filter(|e| e.resolved == Some(true)).count();
    println!(
        "run {}: graded {}, skipped {}, {} of {} resolved",
        a.run_id,
        eval.results.len() + eval.errors.len(),
        eval.skipped,
        resolved,
        m.entries.len()
    );
    for (id, why) in &eval.errors {
        println!("  {id}: {why}");
    }
    if m.entries.is_empty() {
        return Err(empty("run has no entries"));
    }
    Ok(())
}

/// `name=run_id` pairs; a plan input without a pair names a run directly.
fn input_map(plan: &CurationPlan, pairs: &[String]) -> anyhow::Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in pairs {
        let (name, run) = p
            .split_once('=')
            .ok_or_else(|| anyhow!("--input expects name=run_id, got `{p}`"))?;
        map.insert(name.to_string(), run.to_string());
    }
    for name in plan.inputs() {
        map.entry(name.clone()).or_insert(name);
    }
    Ok(map)
}

pub struct CurateArgs {
    pub plan: PathBuf,
    pub inputs: Vec<String>,
    pub output: Option<PathBuf>,
}

pub fn curate_cmd(ctx: &Ctx, a: CurateArgs) -> CliResult {
    let text = fs::read_to_string(&a.plan).with_context(|| format!("reading plan {}", a.plan.display()))?;
    let plan = CurationPlan::parse(&text).with_context(|| format!("in plan {}", a.plan.display()))?;
    let names = input_map(&plan, &a.inputs)?;
    let mut records = BTreeMap::new();
    for (name, run) in &names {
        if !plan.inputs().contains(name) {
            continue;
        }
        let trajs = ctx.store.read_run(run).with_context(|| format!("input `{name}`"))?;
        let rs: Vec<TrajectoryRecord> = trajs.iter().map(|t| TrajectoryRecord::from_trajectory(t, run, name)).collect();
        records.insert(name.clone(), rs);
    }
    let store = &ctx.store;
    let loader = |r: &TrajectoryRecord| -> Result<Trajectory, CurationError> {
        Ok(store.read_trajectory(&r.run_id, &r.trajectory_id)?)
    };
    let (export, report) = curate(&plan, &records, &loader, &WhitespaceEstimator::default())?;
    let stem = a.plan.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "export".into());
    let out = a
        .output
        .unwrap_or_else(|| ctx.store.exports_dir().join(format!("{stem}.jsonl")));
    write_atomic(&out, export.as_bytes())?;
    let used: BTreeMap<String, String> = names.into_iter().filter(|(n, _)| plan.inputs().contains(n)).collect();
    let prov = Provenance::new(&plan, used, &export, report.clone());
    let prov_path = PathBuf::from(format!("{}.provenance.json", out.display()));
    write_json(&prov_path, &prov)?;
    println!(
        "wrote {} records to {} ({} over the token limit); plan {}",
        report.written,
        out.display(),
        report.dropped_over_limit.len(),
        &prov.plan_hash[..12]
    );
    if report.written == 0 {
        return Err(empty("export is empty"));
    }
    Ok(())
}

fn read_scores(path: &Path) -> anyhow::Result<HashMap<String, VerifierScore>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading scores {}", path.display()))?;
    let mut out = HashMap::new();
    for rec in parse_scores(&text).with_context(|| format!("in {}", path.display()))? {
        let s = rec.score().with_context(|| format!("score for `{}`", rec.trajectory_id))?;
        out.insert(s.trajectory_id.clone(), s);
    }
    Ok(out)
}

fn read_runs(store: &Store, run_ids: &[String]) -> anyhow::Result<Vec<Trajectory>> {
    let mut all = Vec::new();
    for r in run_ids {
        all.extend(store.read_run(r).with_context(|| format!("run `{r}`"))?);
    }
    Ok(all)
}

#[derive(Serialize)]
struct Pick {
    instance_id: String,
    trajectory_id: String,
    reward: f64,
    candidates: usize,
    resolved: Option<bool>,
}

pub struct RerankArgs {
    pub run_ids: Vec<String>,
    pub scores: PathBuf,
    pub output: Option<PathBuf>,
}

pub fn rerank(ctx: &Ctx, a: RerankArgs) -> CliResult {
    let scores = read_scores(&a.scores)?;
    let trajs = read_runs(&ctx.store, &a.run_ids)?;
    let mut order = Vec::new();
    let mut groups: HashMap<&str, Vec<&Trajectory>> = HashMap::new();
    for t in &trajs {
        if !scores.contains_key(&t.trajectory_id) {
            continue;
        }
        let g = groups.entry(&t.instance_id).or_default();
        if g.is_empty() {
            order.push(t.instance_id.as_str());
        }
        g.push(t);
    }
    let mut out = String::new();
    let mut resolved = 0;
    for inst in &order {
        let group = &groups[inst];
        let cands: Vec<(&str, f64)> = group
            .iter()
            .map(|t| (t.trajectory_id.as_str(), scores[&t.trajectory_id].reward))
            .collect();
        let best = rerank_best(&cands)?;
        let t = group.iter().find(|t| t.trajectory_id == best).expect("winner is a candidate");
        resolved += (t.resolved == Some(true)) as usize;
        let pick = Pick {
            instance_id: inst.to_string(),
            trajectory_id: best.to_string(),
            reward: scores[best].reward,
            candidates: group.len(),
            resolved: t.resolved,
        };
        out.push_str(&serde_json::to_string(&pick)?);
        out.push('\n');
    }
    let path = a
        .output
        .unwrap_or_else(|| ctx.store.scores_dir().join(format!("{}.rerank.jsonl", a.run_ids.join("+"))));
    write_atomic(&path, out.as_bytes())?;
    println!(
        "picked {} instances, {} resolved; wrote {}",
        order.len(),
        resolved,
        path.display()
    );
    if order.is_empty() {
        return Err(empty("no scored trajectories"));
    }
    Ok(())
}

pub struct ReportArgs {
    pub run_ids: Vec<String>,
    pub scores: Option<PathBuf>,
    pub best: bool,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub n_subsamples: usize,
    pub mode: EstimatorMode,
    pub name: Option<String>,
}

pub fn report(ctx: &Ctx, a: ReportArgs) -> CliResult {
    if a.best && a.scores.is_none() {
        return Err(anyhow!("missing scores: Best@k needs --scores").into());
    }
    let trajs = read_runs(&ctx.store, &a.run_ids)?;
    let rewards: HashMap<String, f64> = match &a.scores {
        Some(p) => read_scores(p)?.into_iter().map(|(k, v)| (k, v.reward)).collect(),
        None => HashMap::new(),
    };
    let outcomes = RunOutcomes::from_trajectories(&trajs, &rewards)?;
    let report = match build_report(&outcomes, &a.ks, a.n_subsamples, a.seed, a.mode, a.scores.is_some()) {
        Err(MetricError::Empty) => return Err(empty("no outcomes to report")),
        other => other?,
    };
    let name = a.name.unwrap_or_else(|| a.run_ids.join("+"));
    let dir = ctx.store.reports_dir();
    let csv = report.to_csv();
    write_atomic(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
    write_atomic(&dir.join(format!("{name}.plot.csv")), report.to_plot_data().as_bytes())?;
    write_json(&dir.join(format!("{name}.json")), &report)?;
    print!("{csv}");
    for (metric, fit) in &report.fits {
        match fit {
            Some(f) => println!(
                "{metric}: {:.4} + {:.4} * log2(k), r2 {:.4}, {} points",
                f.intercept, f.slope, f.r2, f.n_points
            ),
            None => println!("{metric}: no fit"),
        }
    }
    println!(
        "resolution rate {:.4}, empty patches {:.4}, stuck {:.4}, mean turns {:.2}",
        report.rates.resolution_rate, report.rates.empty_patch_rate, report.rates.stuck_rate, report.rates.avg_turns
    );
    Ok(())
}

const TOY_CONFIG: &str = r#"[backend]
kind = "local-process"
snapshots = "snapshots"

[runner]
argv = ["sh", "{file}", "{case}"]
timeout_secs = 20.0
missing_exit_code = 5
discover = ["sh", "-c", "for f in tests/test_*.sh; do sh \"$f\" --list; done"]

[store]
root = "store"
"#;

/// Writes the bundled toy corpus and a matching `gym.toml`.
pub fn toy_corpus(out: &Path) -> CliResult {
    let c = gym_core::toy::write_corpus(out)?;
    let cfg = out.join("gym.toml");
    write_atomic(&cfg, TOY_CONFIG.as_bytes())?;
    println!(
        "wrote {} instances to {}; config {}",
        c.dataset.instances.len(),
        c.dataset_path.display(),
        cfg.display()
    );
    Ok(())
}
