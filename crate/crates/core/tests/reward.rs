mod common;

use gym_core::render::{
    context_from_trajectory, parse_document, render_interleaved, render_interleaved_capped,
    render_parsed_context, ContextSpan, DocStyle, Label, Section,
};
use gym_core::reward::{evaluate_resolution, rerank_best, verifier_reward, VerifierScore};
use gym_core::rollout::{
    run_rollout, Action, ActionKind, GoldPatchAgent, NoopAgent, RolloutPolicy, ScriptedAgent, TokenEstimator,
    Trajectory, WhitespaceEstimator,
};
use gym_core::sandbox::{Backend, LocalBackend};
use gym_core::toy::{toy_runner, valid_ids, write_corpus, ToyCorpus};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus() -> (tempfile::TempDir, ToyCorpus) {
    let dir = tempfile::tempdir().unwrap();
    let c = write_corpus(dir.path()).unwrap();
    (dir, c)
}

fn roll(c: &ToyCorpus, id: &str, agent: &mut dyn gym_core::rollout::Agent) -> Trajectory {
    let inst = c.dataset.get(id).unwrap();
    let mut sb = LocalBackend::new(&c.snapshots).open(inst).unwrap();
    run_rollout(agent, inst, &mut sb, &RolloutPolicy::default(), id, 0, &WhitespaceEstimator::default())
}

fn grade(c: &ToyCorpus, id: &str, t: &Trajectory) -> gym_core::reward::ResolutionResult {
    let inst = c.dataset.get(id).unwrap();
    let mut sb = LocalBackend::new(&c.snapshots).open(inst).unwrap();
    evaluate_resolution(inst, t, &mut sb, &toy_runner()).unwrap()
}

#[test]
fn gold_resolves_and_empty_does_not() {
    let (_d, c) = corpus();
    for id in valid_ids() {
        let inst = c.dataset.get(id).unwrap();
        let gold = roll(&c, id, &mut GoldPatchAgent::new(inst));
        let r = grade(&c, id, &gold);
        assert!(r.resolved, "{id}: {r:?}");
        assert_eq!((r.f2p_passed, r.p2p_passed), (r.f2p_total, r.p2p_total));

        let noop = roll(&c, id, &mut NoopAgent);
        let r = grade(&c, id, &noop);
        assert!(!r.resolved);
        assert!(r.f2p_passed < r.f2p_total);
    }
}

#[test]
fn regression_in_pass_to_pass_is_unresolved() {
    let (_d, c) = corpus();
    let inst = c.dataset.get("toy-calc-1").unwrap();
    let edit = |old: &str, new: &str| {
        Action::new(
            ActionKind::Edit,
            serde_json::json!({"path": "src/calc.sh", "old": old, "new": new}).to_string(),
        )
    };
    let mut agent = ScriptedAgent::new(vec![
        edit("add() { echo $(($1 - $2)); }", "add() { echo $(($1 + $2)); }"),
        edit("mul() { echo $(($1 * $2)); }", "mul() { echo 0; }"),
    ]);
    let t = roll(&c, "toy-calc-1", &mut agent);
    let r = grade(&c, "toy-calc-1", &t);
    assert!(!r.resolved);
    assert_eq!(r.f2p_passed, 1);
    assert_eq!(r.p2p_passed, r.p2p_total - 1);

    // Oracle: run the graded tests directly.
    let mut sb = LocalBackend::new(&c.snapshots).open(inst).unwrap();
    sb.apply_patch(&inst.test_patch).unwrap();
    sb.apply_patch(&t.final_patch).unwrap();
    let report = sb.run_tests(&inst.graded_tests(), &toy_runner()).unwrap();
    assert!(report.passed("tests/test_calc.sh::add"));
    assert!(!report.passed("tests/test_calc.sh::mul"));
    assert!(report.passed("tests/test_calc.sh::sub"));
}

#[test]
fn unappliable_patch_is_unresolved_with_zero_counts() {
    let (_d, c) = corpus();
    let mut t = roll(&c, "toy-text-2", &mut NoopAgent);
    t.final_patch = "--- a/src/text.sh\n+++ b/src/text.sh\n@@ -1 +1 @@\n-nothing like this\n+x\n".into();
    let r = grade(&c, "toy-text-2", &t);
    assert!(!r.resolved);
    assert_eq!((r.f2p_passed, r.p2p_passed), (0, 0));
    assert!(r.note.unwrap().contains("final patch"));
}

#[test]
fn reward_matches_extended_precision_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20_000 {
        let scale = [1.0, 10.0, 1e3, 1e4][i % 4];
        let a = -rng.random::<f64>() * scale;
        let b = -rng.random::<f64>() * scale;
        let r = verifier_reward(a, b).unwrap();
        assert!((r - common::reward_oracle(a, b)).abs() <= 1e-12, "{a} {b}");
        assert!((0.0..=1.0).contains(&r));
        assert!((r + verifier_reward(b, a).unwrap() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    // Strict away from saturation; at |l_yes - l_no| beyond ~37 the reward
    // rounds to exactly 0 or 1 in f64 and only weak monotonicity can hold.
    #[test]
    fn reward_is_monotone(a in -1e4f64..0.0, gap in -20.0f64..20.0, d in 1e-3f64..5.0, far in -1e4f64..1e4) {
        let b = a + gap;
        let r = verifier_reward(a, b).unwrap();
        prop_assert!(verifier_reward(a, b - d).unwrap() > r);
        prop_assert!(verifier_reward(a - d, b).unwrap() < r);
        let (lo, hi) = (far.min(a), far.max(a));
        prop_assert!(verifier_reward(hi, b).unwrap() >= verifier_reward(lo, b).unwrap());
        prop_assert!(verifier_reward(b, hi).unwrap() <= verifier_reward(b, lo).unwrap());
    }

    #[test]
    fn reward_is_shift_invariant(a in -1e3f64..0.0, b in -1e3f64..0.0, s in -100.0f64..100.0) {
        let r = verifier_reward(a, b).unwrap();
        prop_assert!((verifier_reward(a + s, b + s).unwrap() - r).abs() <= 1e-12);
    }

    #[test]
    fn rerank_matches_linear_scan(rs in prop::collection::vec((0usize..30, 0u8..5), 1..100)) {
        let cands: Vec<(String, f64)> = rs
            .iter()
            .enumerate()
            .map(|(i, (id, r))| (format!("t{id:02}-{i:03}"), *r as f64 / 4.0))
            .collect();
        let mut best = &cands[0];
        for c in &cands[1..] {
            if c.1 > best.1 || (c.1 == best.1 && c.0 < best.0) {
                best = c;
            }
        }
        prop_assert_eq!(rerank_best(&cands).unwrap(), best.0.as_str());
    }
}

#[test]
fn score_struct_carries_reward() {
    let s = VerifierScore::new("t", -0.5, -0.5).unwrap();
    assert_eq!(s.reward, 0.5);
    assert_eq!(s.trajectory_id, "t");
}

fn sample_trajectory(c: &ToyCorpus) -> Trajectory {
    let mut agent = ScriptedAgent::new(vec![
        Action::new(ActionKind::View, "src/calc.sh"),
        Action::new(ActionKind::Command, "printf '<<<PATCH>>>\\n\\\\x\\n'"),
        Action::new(ActionKind::Command, "ls"),
    ]);
    roll(c, "toy-calc-1", &mut agent)
}

#[test]
fn interleaved_document_structure() {
    let (_d, c) = corpus();
    let one = roll(&c, "toy-calc-1", &mut NoopAgent);
    let doc = render_interleaved(&one, "", None);
    assert_eq!(doc.style, DocStyle::Interleaved);
    assert_eq!(doc.text.matches("OBSERVATION>>>").count(), 1);
    assert_eq!(doc.text.matches("ACTION>>>").count(), 1);
    assert!(!doc.text.contains("<<<JUDGEMENT>>>"));

    let t = sample_trajectory(&c);
    let doc = render_interleaved(&t, &t.final_patch, Some(Label::Yes));
    assert_eq!(doc, render_interleaved(&t, &t.final_patch, Some(Label::Yes)));
    let sections = parse_document(&doc.text).unwrap();
    assert_eq!(sections[0], (Section::Task, t.problem_statement.clone()));
    assert_eq!(sections.last().unwrap(), &(Section::Judgement, "<YES>".to_string()));
    // Sentinel-like tool output survives the round trip.
    let obs3 = sections
        .iter()
        .find(|(s, _)| *s == Section::Observation(3))
        .unwrap();
    assert_eq!(obs3.1, t.steps[2].observation.content);
    assert!(obs3.1.contains("<<<PATCH>>>\n\\x"));
}

#[test]
fn capped_rendering_elides_oldest_middle_steps() {
    let (_d, c) = corpus();
    let mut agent = ScriptedAgent::new(
        (0..12)
            .map(|i| Action::new(ActionKind::Command, format!("echo step {i} with some words")))
            .collect(),
    );
    let t = roll(&c, "toy-calc-1", &mut agent);
    assert_eq!(t.steps.len(), 13);
    // One token per word keeps counts additive across sections.
    let est = WhitespaceEstimator { per_word_tenths: 10 };
    let full = render_interleaved(&t, "", Some(Label::No));
    let full_tokens = est.count(&full.text);

    let cap = full_tokens / 2;
    let doc = render_interleaved_capped(&t, "", Some(Label::No), cap, &est);
    let sections = parse_document(&doc.text).unwrap();
    let kept: Vec<usize> = sections
        .iter()
        .filter_map(|(s, _)| match s {
            Section::Observation(n) => Some(*n),
            _ => None,
        })
        .collect();
    let elided: Vec<usize> = sections
        .iter()
        .filter_map(|(s, _)| match s {
            Section::Elided(n) => Some(*n),
            _ => None,
        })
        .collect();
    // Head step, then one elision, then a contiguous most-recent block.
    assert_eq!(kept[0], 1);
    assert_eq!(elided.len(), 1);
    assert_eq!(kept.len() + elided[0], 13);
    assert!(kept[1..].windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(*kept.last().unwrap(), 13);
    assert!(est.count(&doc.text) <= cap + est.count("<<<ELIDED 99 STEPS>>>"));

    // Oracle: one more recent step would not have fit.
    let step_tokens = |n: usize| {
        let s = &t.steps[n - 1];
        let mut one = t.clone();
        one.steps = vec![s.clone()];
        let with = est.count(&render_interleaved(&one, "", None).text);
        one.steps.clear();
        with - est.count(&render_interleaved(&one, "", None).text)
    };
    let fixed = est.count(&render_interleaved(&Trajectory { steps: vec![], ..t.clone() }, "", Some(Label::No)).text);
    let used: usize = fixed + kept.iter().map(|&n| step_tokens(n)).sum::<usize>();
    assert!(used <= cap);
    assert!(used + step_tokens(kept[1] - 1) > cap);

    // Under the cap nothing is elided.
    assert_eq!(render_interleaved_capped(&t, "", Some(Label::No), full_tokens, &est), full);
}

#[test]
fn parsed_context_sections_in_order() {
    let (_d, c) = corpus();
    let doc = render_parsed_context("t", "task", &[], "patch", None);
    assert_eq!(
        parse_document(&doc.text).unwrap(),
        vec![(Section::Task, "task".into()), (Section::Patch, "patch".into())]
    );

    let t = sample_trajectory(&c);
    let spans = context_from_trajectory(&t);
    assert_eq!(spans.len(), 1);
    assert_eq!(spans[0].source, "src/calc.sh");
    assert!(spans[0].text.contains("add()"));
    let extra = ContextSpan {
        source: "second".into(),
        text: "two".into(),
    };
    let all = [spans[0].clone(), extra];
    let doc = render_parsed_context(&t.trajectory_id, "task", &all, &t.final_patch, Some(Label::No));
    assert_eq!(doc.style, DocStyle::ParsedContext);
    let s = parse_document(&doc.text).unwrap();
    assert_eq!(s[1].0, Section::Context(1, "src/calc.sh".into()));
    assert_eq!(s[2], (Section::Context(2, "second".into()), "two".into()));
    assert_eq!(s[4], (Section::Judgement, "<NO>".into()));
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "\n", "\\", "<<<", ">>>", "<<<TASK>>>", " ", "\\\\", "\r"]),
        0..12,
    )
    .prop_map(|v| v.concat())
}

proptest! {
    #[test]
    fn parsed_context_round_trips(
        task in text(),
        spans in prop::collection::vec(("[a-z/.]{1,8}", text()), 0..4),
        patch in text(),
        label in prop::option::of(prop::bool::ANY),
    ) {
        let spans: Vec<ContextSpan> = spans.into_iter().map(|(source, text)| ContextSpan { source, text }).collect();
        let label = label.map(Label::from_resolved);
        let doc = render_parsed_context("t", &task, &spans, &patch, label);
        let parsed = parse_document(&doc.text).unwrap();
        let mut want = vec![(Section::Task, task.clone())];
        for (i, s) in spans.iter().enumerate() {
            want.push((Section::Context(i + 1, s.source.clone()), s.text.clone()));
        }
        want.push((Section::Patch, patch.clone()));
        if let Some(l) = label {
            want.push((Section::Judgement, l.token().to_string()));
        }
        prop_assert_eq!(parsed, want);
    }
}

mod run_evaluation {
    use gym_core::reward::{evaluate_run, EvalError};
    use gym_core::rollout::{run_batch, AgentSpec, BatchOptions, RolloutPolicy, WhitespaceEstimator};
    use gym_core::sandbox::LocalBackend;
    use gym_core::store::Store;
    use gym_core::toy::{toy_runner, write_corpus};

    fn opts(run_id: &str) -> BatchOptions {
        BatchOptions {
            run_id: run_id.into(),
            dataset_ref: "toy".into(),
            seed: 3,
            parallelism: 4,
            limit: None,
        }
    }

    #[test]
    fn grades_a_stored_run_in_place() {
        let d = tempfile::tempdir().unwrap();
        let c = write_corpus(d.path()).unwrap();
        let store = Store::open(d.path().join("store")).unwrap();
        let backend = LocalBackend::new(&c.snapshots);
        let policy = RolloutPolicy {
            attempts_per_instance: 2,
            ..RolloutPolicy::default()
        };
        let est = WhitespaceEstimator::default();
        for (run, spec) in [("gold", AgentSpec::GoldPatch), ("noop", AgentSpec::Noop)] {
            run_batch(&spec, &c.dataset, &policy, &backend, &store, &opts(run), &est).unwrap();
        }

        let gold = evaluate_run(&store, "gold", &c.dataset, &backend, &toy_runner(), 3, false).unwrap();
        let again = evaluate_run(&store, "gold", &c.dataset, &backend, &toy_runner(), 3, false).unwrap();
        assert_eq!((again.results.len(), again.skipped), (0, gold.results.len()));
        let serial = evaluate_run(&store, "gold", &c.dataset, &backend, &toy_runner(), 1, true).unwrap();
        assert_eq!(gold, serial);
        assert!(gold.errors.is_empty());
        assert_eq!(gold.results.len(), 2 * c.dataset.instances.len());
        // The corpus includes one instance without a failing test, which
        // can never resolve.
        for r in &gold.results {
            assert_eq!(r.resolved, r.instance_id != "toy-docs-5", "{r:?}");
        }
        let m = store.read_manifest("gold").unwrap();
        for (e, r) in m.entries.iter().zip(&gold.results) {
            assert_eq!(e.trajectory_id, r.trajectory_id);
            assert_eq!(e.resolved, Some(r.resolved));
        }
        for t in store.read_run("gold").unwrap() {
            assert_eq!(t.resolved, Some(t.instance_id != "toy-docs-5"));
        }

        let noop = evaluate_run(&store, "noop", &c.dataset, &backend, &toy_runner(), 2, false).unwrap();
        assert!(noop.results.iter().all(|r| !r.resolved));

        std::fs::remove_dir_all(c.snapshots.join("toy-max-3")).unwrap();
        let broken = evaluate_run(&store, "gold", &c.dataset, &backend, &toy_runner(), 2, true).unwrap();
        assert_eq!(broken.errors.len(), 2);
        let m = store.read_manifest("gold").unwrap();
        let hit: Vec<_> = m.entries.iter().filter(|e| e.instance_id == "toy-max-3").collect();
        assert_eq!(hit.len(), 2);
        assert!(hit.iter().all(|e| e.resolved == Some(false) && e.note.as_ref().unwrap().contains("snapshot")));

        let mut fewer = c.dataset.clone();
        fewer.instances.retain(|i| i.instance_id != "toy-calc-1");
        assert!(matches!(
            evaluate_run(&store, "gold", &fewer, &backend, &toy_runner(), 1, true),
            Err(EvalError::UnknownInstance(id)) if id == "toy-calc-1"
        ));
    }

    #[test]
    fn mixed_run_matches_direct_grading() {
        use gym_core::reward::evaluate_resolution;
        use gym_core::sandbox::Backend;
        let d = tempfile::tempdir().unwrap();
        let c = write_corpus(d.path()).unwrap();
        let store = Store::open(d.path().join("store")).unwrap();
        let backend = LocalBackend::new(&c.snapshots);
        // Fixes toy-calc-1 only; everything else stays broken.
        let script = d.path().join("script.jsonl");
        let edit = serde_json::json!({"path": "src/calc.sh", "old": "add() { echo $(($1 - $2)); }", "new": "add() { echo $(($1 + $2)); }"});
        let line = serde_json::json!({"kind": "edit", "payload": edit.to_string()});
        std::fs::write(&script, format!("{line}\n")).unwrap();
        let spec = AgentSpec::Scripted { path: script };
        let policy = RolloutPolicy::default();
        run_batch(&spec, &c.dataset, &policy, &backend, &store, &opts("mix"), &WhitespaceEstimator::default()).unwrap();
        let eval = evaluate_run(&store, "mix", &c.dataset, &backend, &toy_runner(), 4, false).unwrap();
        let resolved: Vec<&str> = eval.results.iter().filter(|r| r.resolved).map(|r| r.instance_id.as_str()).collect();
        assert_eq!(resolved, ["toy-calc-1"]);
        for t in store.read_run("mix").unwrap() {
            let inst = c.dataset.get(&t.instance_id).unwrap();
            let mut sb = backend.open(inst).unwrap();
            let direct = evaluate_resolution(inst, &t, &mut sb, &toy_runner()).unwrap();
            assert_eq!(t.resolved, Some(direct.resolved));
            assert_eq!(eval.results.iter().find(|r| r.trajectory_id == t.trajectory_id), Some(&direct));
        }
    }
}
