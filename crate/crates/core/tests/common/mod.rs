//! Reference implementations used as test oracles. They share no code with
//! the library.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gym_core::curation::TrajectoryRecord;
use gym_core::metrics::{Attempt, InstanceOutcomes, RunOutcomes};
use gym_core::rollout::{Action, ActionKind, Observation, RolloutPolicy, Step, Termination, Trajectory};

/// An unevaluated sum `hi + lo` with |lo| ≤ ulp(hi)/2, giving about 106
/// bits of precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: e }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    pub const fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.hi, o.hi);
        quick_two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn mul_f(self, x: f64) -> Dd {
        let p = two_prod(self.hi, x);
        quick_two_sum(p.hi, p.lo + self.lo * x)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f(q2));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::from(q3))
    }

    pub fn scale(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

/// exp in double-double: x = k·ln2 + r, exp(r/2^10) by Taylor series, then
/// ten squarings and a scale by 2^k.
pub fn dd_exp(x: Dd) -> Dd {
    if x.hi < -1000.0 {
        return Dd::from(0.0);
    }
    let k = (x.hi / std::f64::consts::LN_2).round();
    let r = x.sub(LN2.mul_f(k)).scale(-10);
    let mut term = Dd::from(1.0);
    let mut sum = Dd::from(1.0);
    for n in 1..=20 {
        term = term.mul(r).div(Dd::from(n as f64));
        sum = sum.add(term);
    }
    for _ in 0..10 {
        sum = sum.mul(sum);
    }
    // Scale in two steps so 2^k itself never underflows.
    let k = k as i32;
    let half = k / 2;
    sum.scale(half).scale(k - half)
}

/// exp(l_yes) / (exp(l_yes) + exp(l_no)) evaluated in double-double.
pub fn reward_oracle(l_yes: f64, l_no: f64) -> f64 {
    if l_no == f64::NEG_INFINITY {
        return 1.0;
    }
    if l_yes == f64::NEG_INFINITY {
        return 0.0;
    }
    let d = two_sum(l_no, -l_yes);
    let one = Dd::from(1.0);
    if d.hi > 0.0 {
        let e = dd_exp(d.neg());
        e.div(one.add(e)).to_f64()
    } else {
        one.div(one.add(dd_exp(d))).to_f64()
    }
}

/// Least squares of `ys` on `[1, x]` via the normal equations.
pub fn normal_equations(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
    let y = DVector::from_column_slice(ys);
    let xt = x.transpose();
    let beta = (&xt * &x).lu().solve(&(&xt * y)).expect("nonsingular");
    (beta[1], beta[0])
}

/// C(n, k) as an exact integer.
pub fn choose(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

pub fn record(id: &str, inst: &str, repo: &str, turns: usize, resolved: bool) -> TrajectoryRecord {
    TrajectoryRecord {
        trajectory_id: id.into(),
        instance_id: inst.into(),
        repo: repo.into(),
        policy_tag: "p".into(),
        resolved: Some(resolved),
        num_turns: turns,
        num_tokens: turns * 40,
        temperature: 1.0,
        run_id: "r".into(),
        source: String::new(),
    }
}

/// Records over `n_inst` instances whose per-instance counts follow a
/// heavy-tailed law: a few instances carry most of the trajectories.
pub fn long_tail(rng: &mut ChaCha8Rng, n_inst: usize, prefix: &str) -> Vec<TrajectoryRecord> {
    let mut out = Vec::new();
    for i in 0..n_inst {
        let u: f64 = rng.random_range(0.0..1.0);
        let count = ((1.0 / (1.0 - u).powf(0.8)).floor() as usize).min(60);
        for j in 0..count {
            out.push(record(
                &format!("{prefix}-{i:03}-{j:02}"),
                &format!("inst-{i:03}"),
                &format!("repo-{}", i % 7),
                rng.random_range(1..40),
                rng.random_bool(0.3),
            ));
        }
    }
    // Interleave instances so grouping cannot rely on adjacency.
    let mut rng2 = ChaCha8Rng::seed_from_u64(rng.random());
    for i in (1..out.len()).rev() {
        out.swap(i, rng2.random_range(0..=i));
    }
    out
}

/// `succ` resolved and `fail` unresolved records, one instance each.
pub fn labeled(prefix: &str, succ: usize, fail: usize) -> Vec<TrajectoryRecord> {
    (0..succ + fail)
        .map(|i| record(&format!("{prefix}-{i:05}"), &format!("{prefix}-i{i:05}"), "repo", 1 + i % 9, i < succ))
        .collect()
}

/// A trajectory with the shape a record describes.
pub fn trajectory_for(r: &TrajectoryRecord) -> Trajectory {
    let steps = (0..r.num_turns)
        .map(|n| Step {
            observation: Observation {
                turn_index: n,
                content: format!("output of turn {n} for {}", r.instance_id),
                truncated: false,
            },
            action: if n % 3 == 1 {
                Action::new(ActionKind::View, format!("src/file{n}.py"))
            } else {
                Action::new(ActionKind::Command, format!("run step {n}"))
            },
        })
        .collect();
    Trajectory {
        trajectory_id: r.trajectory_id.clone(),
        instance_id: r.instance_id.clone(),
        repo: r.repo.clone(),
        problem_statement: format!("Fix {}.", r.instance_id),
        attempt: 0,
        policy_tag: r.policy_tag.clone(),
        temperature: r.temperature,
        policy: RolloutPolicy::default(),
        steps,
        final_patch: String::new(),
        resolved: r.resolved,
        empty_patch: true,
        stuck_in_loop: false,
        num_turns: r.num_turns,
        num_tokens: r.num_tokens,
        termination: Termination::Finished,
        error: None,
    }
}

/// Attempts with the given (resolved, reward) pairs, in order.
pub fn instance(id: &str, attempts: &[(bool, f64)]) -> InstanceOutcomes {
    InstanceOutcomes {
        instance_id: id.into(),
        attempts: attempts
            .iter()
            .enumerate()
            .map(|(i, &(resolved, r))| Attempt {
                trajectory_id: format!("{id}__{i:03}"),
                resolved,
                reward: Some(r),
                empty_patch: false,
                stuck_in_loop: false,
                num_turns: 1 + i,
            })
            .collect(),
    }
}

pub fn outcomes(instances: Vec<InstanceOutcomes>) -> RunOutcomes {
    RunOutcomes {
        instances,
        first_attempt_pinned: false,
    }
}

/// `n_inst` instances with `m` attempts each. Per-instance solve rates vary;
/// rewards are noisy and only loosely track resolution. With `ordered`, every
/// resolved attempt outscores every unresolved one.
pub fn random_outcomes(rng: &mut ChaCha8Rng, n_inst: usize, m: usize, ordered: bool) -> RunOutcomes {
    let instances = (0..n_inst)
        .map(|i| {
            let p: f64 = rng.random_range(0.0..1.0);
            let atts: Vec<(bool, f64)> = (0..m)
                .map(|_| {
                    let ok = rng.random_bool(p);
                    let noise: f64 = rng.random_range(0.0..1.0);
                    let r = if ordered {
                        if ok { 0.5 + noise / 2.0 } else { noise / 2.0 }
                    } else {
                        (noise + if ok { 0.3 } else { 0.0 }).min(1.0)
                    };
                    // Coarse rewards so ties occur.
                    (ok, (r * 16.0).floor() / 16.0)
                })
                .collect();
            instance(&format!("inst{i:04}"), &atts)
        })
        .collect();
    outcomes(instances)
}

#[test]
fn oracle_self_checks() {
    // exp(1) = 2.718281828459045 + 1.4456468917292502e-16 to ~97 bits; the
    // squarings cost a few bits of the full double-double width.
    let e = dd_exp(Dd::from(1.0));
    assert_eq!(e.hi, std::f64::consts::E);
    assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-28);
    assert_eq!(reward_oracle(-1.0, -1.0), 0.5);
    assert!((reward_oracle(-1.0, -2.0) - 0.731_058_578_630_004_9).abs() < 1e-16);
    assert_eq!(choose(12, 6), 924);
    let (s, i) = normal_equations(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
    assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12);
}
