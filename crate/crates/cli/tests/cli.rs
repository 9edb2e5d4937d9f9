use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Toy {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = Command::new(env!("CARGO_BIN_EXE_gym"))
            .args(["toy-corpus", "--out"])
            .arg(&root)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Self { _dir: dir, root }
    }

    fn gym(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gym"))
            .current_dir(&self.root)
            .env_remove("GYM_STORE")
            .arg("--config")
            .arg(self.root.join("gym.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.gym(args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn store(&self) -> PathBuf {
        self.root.join("store")
    }

    fn manifest(&self, run: &str) -> Value {
        read_json(&self.store().join("runs").join(run).join("manifest.json"))
    }

    /// Validates the corpus and runs gold-patch and noop with two attempts.
    fn with_runs(self) -> Self {
        self.ok(&["validate", "--dataset", "dataset.jsonl", "--name", "toy"]);
        for (agent, run) in [("gold-patch", "gold"), ("noop", "noop")] {
            self.ok(&[
                "rollout",
                "--dataset",
                "store/datasets/toy.valid.jsonl",
                "--agent",
                agent,
                "--run-id",
                run,
                "--attempts",
                "2",
                "--temperature",
                "0.8",
            ]);
            self.ok(&["evaluate", "--run-id", run]);
        }
        self
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn validate_rollout_evaluate() {
    let toy = Toy::new();
    let out = toy.ok(&["validate", "--dataset", "dataset.jsonl", "--name", "toy"]);
    assert!(out.starts_with("4 of 5 instances valid"), "{out}");
    let valid = fs::read_to_string(toy.store().join("datasets/toy.valid.jsonl")).unwrap();
    assert_eq!(valid.lines().count(), 4);
    let rejected = fs::read_to_string(toy.store().join("datasets/toy.rejections.jsonl")).unwrap();
    assert_eq!(rejected.lines().count(), 1);
    assert!(rejected.contains("toy-docs-5"));

    let ds = "store/datasets/toy.valid.jsonl";
    let args = ["rollout", "--dataset", ds, "--agent", "gold-patch", "--run-id", "g", "--attempts", "2"];
    let first = toy.ok(&[&args[..], &["--limit", "3"]].concat());
    assert!(first.contains("3 trajectories (3 new)"), "{first}");
    let second = toy.ok(&args);
    assert!(second.contains("8 trajectories (5 new)"), "{second}");
    let third = toy.ok(&args);
    assert!(third.contains("(0 new)"), "{third}");

    let m = toy.manifest("g");
    assert!(Path::new(m["dataset"].as_str().unwrap()).is_absolute());
    assert!(m["entries"].as_array().unwrap().iter().all(|e| e["resolved"].is_null()));

    // Evaluate resolves the dataset from the manifest, from any directory.
    let out = Command::new(env!("CARGO_BIN_EXE_gym"))
        .args(["evaluate", "--run-id", "g", "--store"])
        .arg(toy.store())
        .arg("--config")
        .arg(toy.root.join("gym.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 of 8 resolved"));
    let again = toy.ok(&["evaluate", "--run-id", "g"]);
    assert!(again.contains("graded 0, skipped 8"), "{again}");
    let regraded = toy.ok(&["evaluate", "--run-id", "g", "--regrade"]);
    assert!(regraded.contains("graded 8, skipped 0, 8 of 8"), "{regraded}");
}

#[test]
fn usage_and_empty_exit_codes() {
    let toy = Toy::new();
    let out = toy.gym(&["rollout", "--dataset", "dataset.jsonl", "--agent", "telepathy", "--run-id", "x"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("invalid agent spec"));
    let out = toy.gym(&["rollout", "--dataset", "dataset.jsonl", "--agent", "scripted:missing.json", "--run-id", "x"]);
    assert_eq!(code(&out), Some(2), "{}", stderr(&out));
    assert!(!toy.store().join("runs/x/manifest.json").exists());
    let out = toy.gym(&["evaluate", "--run-id", "nothing"]);
    assert_eq!(code(&out), Some(2));
    let out = toy.gym(&["validate"]);
    assert_eq!(code(&out), Some(2));

    // Only the instance that never validates: nothing survives.
    let raw = fs::read_to_string(toy.root.join("dataset.jsonl")).unwrap();
    let docs: String = raw.lines().filter(|l| l.contains("toy-docs-5")).collect();
    fs::write(toy.root.join("docs.jsonl"), docs + "\n").unwrap();
    let out = toy.gym(&["validate", "--dataset", "docs.jsonl"]);
    assert_eq!(code(&out), Some(1), "{}", stderr(&out));
}

#[test]
fn bad_config_is_a_usage_error() {
    let toy = Toy::new();
    fs::write(toy.root.join("gym.toml"), "[policy]\nmax_turn = 3\n").unwrap();
    let out = toy.gym(&["validate", "--dataset", "dataset.jsonl"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("unknown policy key `max_turn`"), "{}", stderr(&out));
    fs::write(toy.root.join("gym.toml"), "[backend]\nkind = \"submarine\"\n").unwrap();
    assert_eq!(code(&toy.gym(&["validate", "--dataset", "dataset.jsonl"])), Some(2));
}

#[test]
fn store_flag_and_env_override_config() {
    let toy = Toy::new();
    let elsewhere = toy.root.join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_gym"))
        .current_dir(&toy.root)
        .env("GYM_STORE", &elsewhere)
        .args(["--config", "gym.toml", "validate", "--dataset", "dataset.jsonl", "--name", "e"])
        .output()
        .unwrap();
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    assert!(elsewhere.join("datasets/e.valid.jsonl").is_file());
    assert!(!toy.store().join("datasets/e.valid.jsonl").exists());

    let flag = toy.root.join("flag");
    let out = Command::new(env!("CARGO_BIN_EXE_gym"))
        .current_dir(&toy.root)
        .env("GYM_STORE", &elsewhere)
        .args(["--config", "gym.toml", "--store"])
        .arg(&flag)
        .args(["validate", "--dataset", "dataset.jsonl", "--name", "f"])
        .output()
        .unwrap();
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    assert!(flag.join("datasets/f.valid.jsonl").is_file());
}

const PLAN: &str = r#"{
  "steps": [
    {"op": "mix", "sets": [
      {"input": "pos", "steps": [{"op": "filter_success"}]},
      {"input": "neg", "steps": [{"op": "cap", "c": 1}]}
    ]},
    {"op": "balance", "seed": 3}
  ],
  "export": {"kind": "verifier", "style": "interleaved", "token_cap": 200}
}"#;

#[test]
fn curate_replays_byte_identically() {
    let toy = Toy::new().with_runs();
    fs::write(toy.root.join("plan.json"), PLAN).unwrap();
    let args = ["curate", "--plan", "plan.json", "--input", "pos=gold", "--input", "neg=noop"];
    toy.ok(&[&args[..], &["--output", "a.jsonl"]].concat());
    toy.ok(&[&args[..], &["--output", "b.jsonl"]].concat());
    let a = fs::read(toy.root.join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(toy.root.join("b.jsonl")).unwrap());

    let docs: Vec<Value> = String::from_utf8(a).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 8 successes; the cap keeps one failure per instance.
    assert_eq!(docs.len(), 8);

    let prov = read_json(&toy.root.join("a.jsonl.provenance.json"));
    assert_eq!(prov["inputs"]["pos"], "gold");
    assert_eq!(prov["inputs"]["neg"], "noop");
    assert_eq!(prov["seeds"], serde_json::json!([3]));
    assert_eq!(prov["report"]["written"], 8);
    assert_eq!(prov["report"]["by_label"]["YES"], 4);
    assert_eq!(prov["report"]["by_label"]["NO"], 4);

    // The recorded plan replays to the same bytes.
    fs::write(toy.root.join("replay.json"), serde_json::to_string(&prov["plan"]).unwrap()).unwrap();
    toy.ok(&["curate", "--plan", "replay.json", "--input", "pos=gold", "--input", "neg=noop", "--output", "c.jsonl"]);
    assert_eq!(
        fs::read(toy.root.join("a.jsonl")).unwrap(),
        fs::read(toy.root.join("c.jsonl")).unwrap()
    );
}

#[test]
fn curate_errors() {
    let toy = Toy::new().with_runs();
    fs::write(toy.root.join("bad.json"), r#"{"steps": [{"op": "shuffle"}]}"#).unwrap();
    let out = toy.gym(&["curate", "--plan", "bad.json"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("unknown variant `shuffle`"));

    fs::write(toy.root.join("neg.json"), r#"{"input": "x", "steps": [{"op": "filter_success"}]}"#).unwrap();
    let out = toy.gym(&["curate", "--plan", "neg.json", "--input", "x=noop"]);
    assert_eq!(code(&out), Some(1), "{}", stderr(&out));

    // Strict balance without enough failures.
    fs::write(
        toy.root.join("strict.json"),
        r#"{"input": "x", "steps": [{"op": "balance", "seed": 1, "strict": true}],
            "export": {"kind": "verifier", "style": "parsed-context"}}"#,
    )
    .unwrap();
    let out = toy.gym(&["curate", "--plan", "strict.json", "--input", "x=gold"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("insufficient failures"), "{}", stderr(&out));

    let out = toy.gym(&["curate", "--plan", "neg.json", "--input", "x"]);
    assert_eq!(code(&out), Some(2));
}

fn write_scores(toy: &Toy) {
    let mut lines = String::new();
    for (run, l_yes) in [("gold", -0.2), ("noop", -3.0)] {
        for (i, e) in toy.manifest(run)["entries"].as_array().unwrap().iter().enumerate() {
            let l_yes = if run == "noop" && i % 2 == 0 {
                Value::from("-inf")
            } else {
                Value::from(l_yes - 0.01 * i as f64)
            };
            let row = serde_json::json!({"trajectory_id": e["trajectory_id"], "l_yes": l_yes, "l_no": -1.0});
            lines.push_str(&format!("{row}\n"));
        }
    }
    fs::write(toy.root.join("scores.jsonl"), lines).unwrap();
}

#[test]
fn rerank_picks_highest_reward() {
    let toy = Toy::new().with_runs();
    write_scores(&toy);
    let out = toy.ok(&[
        "rerank", "--run-id", "gold", "--run-id", "noop", "--scores", "scores.jsonl", "--output", "picks.jsonl",
    ]);
    assert!(out.starts_with("picked 4 instances, 4 resolved"), "{out}");
    let picks: Vec<Value> = fs::read_to_string(toy.root.join("picks.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(picks.len(), 4);
    for p in &picks {
        assert_eq!(p["candidates"], 4);
        // Attempt 0 of the gold run has the larger logprob.
        assert!(p["trajectory_id"].as_str().unwrap().ends_with("__0"));
        assert!(p["trajectory_id"].as_str().unwrap().starts_with("gold__"));
    }

    fs::write(toy.root.join("broken.jsonl"), "{\"trajectory_id\": \"a\"}\n").unwrap();
    let out = toy.gym(&["rerank", "--run-id", "gold", "--scores", "broken.jsonl"]);
    assert_eq!(code(&out), Some(2));
}

#[test]
fn report_is_deterministic() {
    let toy = Toy::new().with_runs();
    write_scores(&toy);
    let args = [
        "report", "--run-id", "gold", "--run-id", "noop", "--scores", "scores.jsonl", "--best", "--ks", "1,2,4",
        "--mode", "sampled", "--n-subsamples", "50", "--seed", "7",
    ];
    toy.ok(&[&args[..], &["--name", "r1"]].concat());
    toy.ok(&[&args[..], &["--name", "r2"]].concat());
    let reports = toy.store().join("reports");
    let csv = fs::read_to_string(reports.join("r1.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(reports.join("r2.csv")).unwrap());
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for metric in ["pass_at_k", "best_at_k"] {
        for k in [1, 2, 4] {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{metric},{k},"))), "{metric} {k}");
        }
    }
    // Every instance has two resolved attempts out of four.
    assert!(rows.contains(&"pass_at_k,4,1,0,50"));
    let json = read_json(&reports.join("r1.json"));
    assert_eq!(json["seed"], 7);
    assert_eq!(json["rates"]["n_instances"], 4);
    assert!(reports.join("r1.plot.csv").is_file());
    // Every resolved attempt outscores every unresolved one, so Best@k
    // matches Pass@k on the same subsamples.
    let mean = |metric: &str, k: usize| {
        let row = rows.iter().find(|r| r.starts_with(&format!("{metric},{k},"))).unwrap();
        row.split(',').nth(2).unwrap().to_string()
    };
    for k in [1, 2, 4] {
        assert_eq!(mean("best_at_k", k), mean("pass_at_k", k), "k={k}");
    }
    assert_ne!(mean("pass_at_k", 2), "1");
}

#[test]
fn report_usage_errors() {
    let toy = Toy::new().with_runs();
    let out = toy.gym(&["report", "--run-id", "gold", "--best"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("missing scores"));
    let out = toy.gym(&["report", "--run-id", "gold", "--ks", "1,3"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("exceeds"));
    let out = toy.gym(&["report", "--run-id", "gold", "--ks", "0"]);
    assert_eq!(code(&out), Some(2));
    let out = toy.gym(&["report", "--run-id", "missing"]);
    assert_eq!(code(&out), Some(2));
}
