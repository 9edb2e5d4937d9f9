//! Evaluation metrics: resolution rate, per-run rates, Pass@k and Best@k
//! estimated over subsamples of each instance's attempts, and log-linear
//! scaling fits.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::rerank_best;
use crate::rollout::Trajectory;
use crate::seed;

/// Largest per-instance subset count enumerated exactly.
pub const EXHAUSTIVE_LIMIT: u128 = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no instances")]
    Empty,
    #[error("k must be at least 1")]
    KZero,
    #[error("k={k} exceeds the {m} attempts of `{instance_id}`")]
    KExceedsM { instance_id: String, k: usize, m: usize },
    #[error("attempt `{0}` has no reward")]
    MissingReward(String),
    #[error("attempt `{0}` has not been evaluated")]
    Unevaluated(String),
    #[error("instance `{0}` has no attempt {1}")]
    MissingAttempt(String, usize),
    #[error("exhaustive mode needs at most {EXHAUSTIVE_LIMIT} subsets per instance")]
    TooManySubsets,
    #[error("n_subsamples must be at least 1")]
    NoSubsamples,
    #[error("need at least two points with distinct k to fit")]
    Degenerate,
    #[error("invalid point: {0}")]
    BadPoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub trajectory_id: String,
    pub resolved: bool,
    #[serde(default)]
    pub reward: Option<f64>,
    pub empty_patch: bool,
    pub stuck_in_loop: bool,
    pub num_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcomes {
    pub instance_id: String,
    /// In attempt order.
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcomes {
    pub instances: Vec<InstanceOutcomes>,
    /// The first attempt of every instance was sampled at temperature 0, so
    /// k=1 reports it instead of subsampling.
    #[serde(default)]
    pub first_attempt_pinned: bool,
}

impl RunOutcomes {
    /// Groups evaluated trajectories by instance (first-seen order) and
    /// attempt. `rewards` maps trajectory ids to verifier rewards.
    pub fn from_trajectories(trajs: &[Trajectory], rewards: &HashMap<String, f64>) -> Result<Self, MetricError> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<&str, Vec<&Trajectory>> = HashMap::new();
        for t in trajs {
            let g = groups.entry(&t.instance_id).or_default();
            if g.is_empty() {
                order.push(t.instance_id.clone());
            }
            g.push(t);
        }
        let mut pinned = true;
        let mut instances = Vec::new();
        for id in order {
            let mut ts = groups.remove(id.as_str()).expect("grouped");
            ts.sort_by_key(|t| t.attempt);
            pinned &= ts[0].attempt == 0 && ts[0].temperature == 0.0;
            let attempts = ts
                .iter()
                .map(|t| {
                    Ok(Attempt {
                        trajectory_id: t.trajectory_id.clone(),
                        resolved: t
                            .resolved
                            .ok_or_else(|| MetricError::Unevaluated(t.trajectory_id.clone()))?,
                        reward: rewards.get(&t.trajectory_id).copied(),
                        empty_patch: t.empty_patch,
                        stuck_in_loop: t.stuck_in_loop,
                        num_turns: t.num_turns,
                    })
                })
                .collect::<Result<Vec<_>, MetricError>>()?;
            instances.push(InstanceOutcomes {
                instance_id: id,
                attempts,
            });
        }
        Ok(Self {
            first_attempt_pinned: pinned && !instances.is_empty(),
            instances,
        })
    }
}

/// Resolved fraction over instances, scoring attempt `attempt` of each.
pub fn resolution_rate(outcomes: &RunOutcomes, attempt: usize) -> Result<f64, MetricError> {
    if outcomes.instances.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut hits = 0usize;
    for inst in &outcomes.instances {
        let a = inst
            .attempts
            .get(attempt)
            .ok_or_else(|| MetricError::MissingAttempt(inst.instance_id.clone(), attempt))?;
        hits += a.resolved as usize;
    }
    Ok(hits as f64 / outcomes.instances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub n_instances: usize,
    pub resolution_rate: f64,
    pub empty_patch_rate: f64,
    pub stuck_rate: f64,
    pub avg_turns: f64,
}

/// First-attempt rates over instances.
pub fn aggregate_rates(outcomes: &RunOutcomes) -> Result<Rates, MetricError> {
    let n = outcomes.instances.len();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let mut first = Vec::with_capacity(n);
    for inst in &outcomes.instances {
        first.push(
            inst.attempts
                .first()
                .ok_or_else(|| MetricError::MissingAttempt(inst.instance_id.clone(), 0))?,
        );
    }
    let frac = |f: &dyn Fn(&Attempt) -> bool| first.iter().filter(|a| f(a)).count() as f64 / n as f64;
    Ok(Rates {
        n_instances: n,
        resolution_rate: frac(&|a| a.resolved),
        empty_patch_rate: frac(&|a| a.empty_patch),
        stuck_rate: frac(&|a| a.stuck_in_loop),
        avg_turns: first.iter().map(|a| a.num_turns as f64).sum::<f64>() / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PassAtK,
    BestAtK,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::PassAtK => "pass_at_k",
            Metric::BestAtK => "best_at_k",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Exhaustive when every instance has at most [`EXHAUSTIVE_LIMIT`]
    /// subsets, sampled otherwise.
    #[default]
    Auto,
    Exhaustive,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub metric: Metric,
    pub k: usize,
    pub mean: f64,
    /// Variance of the subsample-level resolution rate.
    pub variance: f64,
    /// 0 when the estimate is exact (exhaustive mode or a pinned k=1).
    pub n_subsamples: usize,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

fn score(inst: &InstanceOutcomes, drawn: &[usize], metric: Metric) -> Result<bool, MetricError> {
    match metric {
        Metric::PassAtK => Ok(drawn.iter().any(|&i| inst.attempts[i].resolved)),
        Metric::BestAtK => {
            let mut cands = Vec::with_capacity(drawn.len());
            for &i in drawn {
                let a = &inst.attempts[i];
                let r = a.reward.ok_or_else(|| MetricError::MissingReward(a.trajectory_id.clone()))?;
                cands.push((a.trajectory_id.as_str(), r));
            }
            let best = rerank_best(&cands).map_err(|_| MetricError::MissingReward(inst.instance_id.clone()))?;
            let i = drawn
                .iter()
                .find(|&&i| inst.attempts[i].trajectory_id == best)
                .expect("winner is drawn");
            Ok(inst.attempts[*i].resolved)
        }
    }
}

/// Calls `f` on every k-subset of 0..m in lexicographic order.
fn for_each_subset(m: usize, k: usize, mut f: impl FnMut(&[usize]) -> Result<(), MetricError>) -> Result<(), MetricError> {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx)?;
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + m - k) else {
            return Ok(());
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn check_k(outcomes: &RunOutcomes, k: usize) -> Result<(), MetricError> {
    if outcomes.instances.is_empty() {
        return Err(MetricError::Empty);
    }
    if k == 0 {
        return Err(MetricError::KZero);
    }
    for inst in &outcomes.instances {
        if k > inst.attempts.len() {
            return Err(MetricError::KExceedsM {
                instance_id: inst.instance_id.clone(),
                k,
                m: inst.attempts.len(),
            });
        }
    }
    Ok(())
}

fn estimate(
    outcomes: &RunOutcomes,
    metric: Metric,
    k: usize,
    n_subsamples: usize,
    master_seed: u64,
    mode: EstimatorMode,
) -> Result<MetricEstimate, MetricError> {
    check_k(outcomes, k)?;
    let n = outcomes.instances.len() as f64;

    if k == 1 && outcomes.first_attempt_pinned {
        let mut hits = 0usize;
        for inst in &outcomes.instances {
            hits += score(inst, &[0], metric)? as usize;
        }
        return Ok(MetricEstimate {
            metric,
            k,
            mean: hits as f64 / n,
            variance: 0.0,
            n_subsamples: 0,
        });
    }

    let small = outcomes
        .instances
        .iter()
        .all(|i| binomial(i.attempts.len(), k) <= EXHAUSTIVE_LIMIT);
    let exhaustive = match mode {
        EstimatorMode::Auto => small,
        EstimatorMode::Exhaustive if !small => return Err(MetricError::TooManySubsets),
        EstimatorMode::Exhaustive => true,
        EstimatorMode::Sampled => false,
    };

    if exhaustive {
        let mut sum = 0.0;
        let mut var = 0.0;
        for inst in &outcomes.instances {
            let (mut hits, mut total) = (0u64, 0u64);
            for_each_subset(inst.attempts.len(), k, |drawn| {
                hits += score(inst, drawn, metric)? as u64;
                total += 1;
                Ok(())
            })?;
            let p = hits as f64 / total as f64;
            sum += p;
            var += p * (1.0 - p);
        }
        return Ok(MetricEstimate {
            metric,
            k,
            mean: sum / n,
            variance: var / (n * n),
            n_subsamples: 0,
        });
    }

    if n_subsamples == 0 {
        return Err(MetricError::NoSubsamples);
    }
    let mut rates = Vec::with_capacity(n_subsamples);
    for s in 0..n_subsamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(master_seed, s as u64));
        let mut hits = 0usize;
        for inst in &outcomes.instances {
            let drawn = sample(&mut rng, inst.attempts.len(), k).into_vec();
            hits += score(inst, &drawn, metric)? as usize;
        }
        rates.push(hits as f64 / n);
    }
    let mean = rates.iter().sum::<f64>() / n_subsamples as f64;
    let variance = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n_subsamples as f64;
    Ok(MetricEstimate {
        metric,
        k,
        mean,
        variance,
        n_subsamples,
    })
}

/// Probability that some of `k` attempts drawn without replacement is
/// resolved. Subsample `s` uses seed `seed::derive(master_seed, s)`, and
/// Best@k with the same arguments sees the same draws.
pub fn pass_at_k_subsampled(
    outcomes: &RunOutcomes,
    k: usize,
    n_subsamples: usize,
    master_seed: u64,
    mode: EstimatorMode,
) -> Result<MetricEstimate, MetricError> {
    estimate(outcomes, Metric::PassAtK, k, n_subsamples, master_seed, mode)
}

/// Probability that the highest-reward of `k` drawn attempts is resolved.
pub fn best_at_k_subsampled(
    outcomes: &RunOutcomes,
    k: usize,
    n_subsamples: usize,
    master_seed: u64,
    mode: EstimatorMode,
) -> Result<MetricEstimate, MetricError> {
    estimate(outcomes, Metric::BestAtK, k, n_subsamples, master_seed, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub k: usize,
    pub value: f64,
    /// Left out of the fit (e.g. a greedy k=1 point).
    #[serde(default)]
    pub excluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub log_base: u32,
    pub n_points: usize,
}

/// Least squares of `value` against `log2(k)` over the non-excluded points.
pub fn fit_log_linear(points: &[ScalingPoint]) -> Result<LogLinearFit, MetricError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in points.iter().filter(|p| !p.excluded) {
        if p.k == 0 || !p.value.is_finite() {
            return Err(MetricError::BadPoint(format!("k={} value={}", p.k, p.value)));
        }
        xs.push((p.k as f64).log2());
        ys.push(p.value);
    }
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Err(MetricError::Degenerate);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(MetricError::Degenerate);
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LogLinearFit {
        slope,
        intercept,
        r2,
        log_base: 2,
        n_points: xs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub n_subsamples: usize,
    pub mode: EstimatorMode,
    pub rates: Rates,
    pub estimates: Vec<MetricEstimate>,
    pub fits: BTreeMap<String, Option<LogLinearFit>>,
}

/// Pass@k (and Best@k when `with_best`) for every k, plus a log-linear fit
/// per metric. A pinned k=1 point is excluded from the fit.
pub fn build_report(
    outcomes: &RunOutcomes,
    ks: &[usize],
    n_subsamples: usize,
    seed: u64,
    mode: EstimatorMode,
    with_best: bool,
) -> Result<MetricsReport, MetricError> {
    let rates = aggregate_rates(outcomes)?;
    let mut metrics = vec![Metric::PassAtK];
    if with_best {
        metrics.push(Metric::BestAtK);
    }
    let mut estimates = Vec::new();
    let mut fits = BTreeMap::new();
    for m in metrics {
        let mut points = Vec::new();
        for &k in ks {
            let e = estimate(outcomes, m, k, n_subsamples, seed, mode)?;
            points.push(ScalingPoint {
                k,
                value: e.mean,
                excluded: k == 1 && outcomes.first_attempt_pinned,
            });
            estimates.push(e);
        }
        fits.insert(m.name().to_string(), fit_log_linear(&points).ok());
    }
    Ok(MetricsReport {
        seed,
        n_subsamples,
        mode,
        rates,
        estimates,
        fits,
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k,mean,variance,n_subsamples\n");
        for e in &self.estimates {
            let _ = writeln!(s, "{},{},{},{},{}", e.metric.name(), e.k, e.mean, e.variance, e.n_subsamples);
        }
        s
    }

    /// `metric,k,mean,stddev` rows for plotting.
    pub fn to_plot_data(&self) -> String {
        let mut s = String::from("metric,k,mean,stddev\n");
        for e in &self.estimates {
            let _ = writeln!(s, "{},{},{},{}", e.metric.name(), e.k, e.mean, e.variance.sqrt());
        }
        s
    }
}
