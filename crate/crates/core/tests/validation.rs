use std::collections::BTreeSet;
use std::fs;

use gym_core::sandbox::{Backend, LocalBackend};
use gym_core::task::{Dataset, Split, TaskInstance};
use gym_core::toy::{toy_runner, valid_ids, write_corpus, ToyCorpus};
use gym_core::validation::{
    assign_version, candidate_tests, validate_dataset, validate_instance, RejectReason, ValidationStatus,
    VersionProbe,
};

fn corpus() -> (tempfile::TempDir, ToyCorpus) {
    let dir = tempfile::tempdir().unwrap();
    let c = write_corpus(dir.path()).unwrap();
    (dir, c)
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn toy_corpus_partitions_four_valid_one_rejected() {
    let (_d, c) = corpus();
    let backend = LocalBackend::new(&c.snapshots);
    let (valid, report) = validate_dataset(&c.dataset, &backend, &toy_runner(), 4);

    let ids: Vec<&str> = valid.instances.iter().map(|i| i.instance_id.as_str()).collect();
    assert_eq!(ids, valid_ids());
    assert_eq!(valid.split, Split::Full);
    assert_eq!(report.rejected_by_reason.get(&RejectReason::NoNewPassingTests), Some(&1));
    let rejected: Vec<_> = report.rejections().collect();
    assert_eq!(rejected.len(), 1);
    assert_eq!(rejected[0].instance_id, "toy-docs-5");

    for o in &report.outcomes {
        assert!(o.fail_to_pass.is_disjoint(&o.pass_to_pass));
        if o.is_valid() {
            assert!(!o.fail_to_pass.is_empty());
            assert!(o.reject_reason.is_none());
        }
    }
    // Derived sets equal the ones the corpus was constructed with.
    for inst in &valid.instances {
        let built = c.dataset.get(&inst.instance_id).unwrap();
        assert_eq!(inst.fail_to_pass, built.fail_to_pass, "{}", inst.instance_id);
        assert_eq!(inst.pass_to_pass, built.pass_to_pass, "{}", inst.instance_id);
    }
    let max = valid.get("toy-max-3").unwrap();
    assert_eq!(max.fail_to_pass, set(&["tests/test_max.sh::max_second"]));
    assert_eq!(max.pass_to_pass.len(), 3);

    let jsonl = report.to_jsonl();
    assert_eq!(jsonl.lines().count(), 1);
    let row: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(row["reject_reason"], "no_new_passing_tests");
    assert_eq!(row["status"], "rejected");
}

#[test]
fn derived_sets_match_direct_test_runs() {
    let (_d, c) = corpus();
    let backend = LocalBackend::new(&c.snapshots);
    let runner = toy_runner();
    for id in valid_ids() {
        let inst = c.dataset.get(id).unwrap();
        let mut sb = backend.open(inst).unwrap();
        let cands = candidate_tests(inst, &mut sb, &runner).unwrap();
        let outcome = validate_instance(inst, &mut sb, &cands, &runner);

        // Oracle: run the candidates directly in both states.
        sb.reset().unwrap();
        sb.apply_patch(&inst.test_patch).unwrap();
        let r0 = sb.run_tests(&cands, &runner).unwrap();
        sb.reset().unwrap();
        sb.apply_patch(&inst.test_patch).unwrap();
        sb.apply_patch(&inst.gold_patch).unwrap();
        let r1 = sb.run_tests(&cands, &runner).unwrap();
        let f2p: BTreeSet<_> = cands.iter().filter(|t| !r0.passed(t) && r1.passed(t)).cloned().collect();
        let p2p: BTreeSet<_> = cands.iter().filter(|t| r0.passed(t) && r1.passed(t)).cloned().collect();
        assert_eq!(outcome.fail_to_pass, f2p);
        assert_eq!(outcome.pass_to_pass, p2p);
        // Valid instances pass every graded test after the gold patch.
        assert!(f2p.iter().chain(&p2p).all(|t| r1.passed(t)));

        // Idempotent on a fresh sandbox.
        sb.reset().unwrap();
        assert_eq!(validate_instance(inst, &mut sb, &cands, &runner), outcome);
    }
}

#[test]
fn mismatching_gold_patch_is_rejected() {
    let (_d, c) = corpus();
    let backend = LocalBackend::new(&c.snapshots);
    let mut inst = c.dataset.get("toy-calc-1").unwrap().clone();
    inst.gold_patch = inst.gold_patch.replace("-add() { echo $(($1 - $2)); }", "-add() { echo nothing; }");
    let mut sb = backend.open(&inst).unwrap();
    let cands = candidate_tests(&inst, &mut sb, &toy_runner()).unwrap();
    let o = validate_instance(&inst, &mut sb, &cands, &toy_runner());
    assert_eq!(o.status, ValidationStatus::Rejected);
    assert_eq!(o.reject_reason, Some(RejectReason::GoldPatchFailedToApply));
}

#[test]
fn missing_snapshot_becomes_a_rejection() {
    let (_d, c) = corpus();
    fs::remove_dir_all(c.snapshots.join("toy-text-2")).unwrap();
    let backend = LocalBackend::new(&c.snapshots);
    let (valid, report) = validate_dataset(&c.dataset, &backend, &toy_runner(), 2);
    assert_eq!(valid.instances.len(), 3);
    assert_eq!(report.rejected_by_reason.get(&RejectReason::TestRunError), Some(&1));
}

#[test]
fn parallelism_does_not_change_results() {
    let (_d, c) = corpus();
    let backend = LocalBackend::new(&c.snapshots);
    let a = validate_dataset(&c.dataset, &backend, &toy_runner(), 1);
    let b = validate_dataset(&c.dataset, &backend, &toy_runner(), 4);
    assert_eq!(a, b);
}

#[test]
fn empty_and_lite_datasets() {
    let (_d, c) = corpus();
    let backend = LocalBackend::new(&c.snapshots);
    let empty = Dataset::new("e", Split::Raw, vec![]).unwrap();
    let (v, r) = validate_dataset(&empty, &backend, &toy_runner(), 3);
    assert!(v.instances.is_empty() && r.outcomes.is_empty());

    let lite = Dataset {
        split: Split::Lite,
        ..c.dataset.clone()
    };
    assert_eq!(validate_dataset(&lite, &backend, &toy_runner(), 2).0.split, Split::Lite);
}

fn versioned(c: &ToyCorpus, version_file: Option<&str>) -> (LocalBackend, TaskInstance) {
    let inst = c.dataset.get("toy-calc-1").unwrap().clone();
    if let Some(text) = version_file {
        fs::write(c.snapshots.join(&inst.instance_id).join("VERSION"), text).unwrap();
    }
    (LocalBackend::new(&c.snapshots), inst)
}

#[test]
fn version_probes_in_order() {
    let (_d, c) = corpus();
    let file_probe = VersionProbe::File {
        path: "VERSION".into(),
        pattern: r"(\d+\.\d+\.\d+)".into(),
    };
    let cmd_probe = VersionProbe::Command {
        argv: vec!["sh".into(), "-c".into(), "echo release-0.9".into()],
        pattern: r"release-(\S+)".into(),
    };

    let (b, inst) = versioned(&c, Some("version = 1.2.3\n"));
    let mut sb = b.open(&inst).unwrap();
    assert_eq!(assign_version(&mut sb, &[file_probe.clone(), cmd_probe.clone()]), "1.2.3");

    fs::remove_file(c.snapshots.join("toy-calc-1/VERSION")).unwrap();
    let mut sb = b.open(&inst).unwrap();
    assert_eq!(assign_version(&mut sb, &[file_probe.clone(), cmd_probe]), "0.9");
    assert_eq!(assign_version(&mut sb, &[file_probe]), "unknown");
    assert_eq!(assign_version(&mut sb, &[]), "unknown");
}
