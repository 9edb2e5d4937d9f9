//! A small synthetic corpus of shell-script repositories.
//!
//! Every instance is a directory snapshot plus a dataset record. Tests are
//! `tests/test_<module>.sh <case>` invocations that exit 0 on success and 5
//! for an unknown case; `--list` prints the identifiers. Four instances are
//! constructed valid; `toy-docs-5` has a gold patch that only edits
//! documentation, so validation must reject it.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};

use crate::diff::diff_file;
use crate::sandbox::RunnerConfig;
use crate::task::{save_dataset, Dataset, Split, TaskInstance};

pub const TOY_MISSING_EXIT: i32 = 5;

struct Case {
    name: &'static str,
    check: &'static str,
}

struct ToySpec {
    id: &'static str,
    module: &'static str,
    statement: &'static str,
    /// Source before and after the fix.
    source: (&'static str, &'static str),
    cases: Vec<Case>,
    /// Cases introduced by the test patch.
    new_cases: Vec<Case>,
    /// Extra files (path, before, after) changed by the gold patch.
    extra: Vec<(&'static str, Option<&'static str>, Option<&'static str>)>,
    fail_to_pass: Vec<&'static str>,
    pass_to_pass: Vec<&'static str>,
}

fn script(module: &str, cases: &[&Case]) -> String {
    let mut s = format!("#!/bin/sh\n. ./src/{module}.sh\ncase \"$1\" in\n  --list)\n");
    for c in cases {
        s.push_str(&format!("    echo \"tests/test_{module}.sh::{}\"\n", c.name));
    }
    s.push_str("    ;;\n");
    for c in cases {
        s.push_str(&format!("  {}) {} ;;\n", c.name, c.check));
    }
    s.push_str(&format!("  *) exit {TOY_MISSING_EXIT} ;;\nesac\n"));
    s
}

fn specs() -> Vec<ToySpec> {
    vec![
        ToySpec {
            id: "toy-calc-1",
            module: "calc",
            statement: "The add helper in src/calc.sh subtracts its second argument instead of adding it, so add 2 3 prints -1.",
            source: (
                "add() { echo $(($1 - $2)); }\nsub() { echo $(($1 - $2)); }\nmul() { echo $(($1 * $2)); }\n",
                "add() { echo $(($1 + $2)); }\nsub() { echo $(($1 - $2)); }\nmul() { echo $(($1 * $2)); }\n",
            ),
            cases: vec![
                Case { name: "sub", check: "[ \"$(sub 5 3)\" = \"2\" ]" },
                Case { name: "mul", check: "[ \"$(mul 4 3)\" = \"12\" ]" },
            ],
            new_cases: vec![Case { name: "add", check: "[ \"$(add 2 3)\" = \"5\" ]" }],
            extra: vec![],
            fail_to_pass: vec!["tests/test_calc.sh::add"],
            pass_to_pass: vec!["tests/test_calc.sh::mul", "tests/test_calc.sh::sub"],
        },
        ToySpec {
            id: "toy-text-2",
            module: "text",
            statement: "upper in src/text.sh leaves the letter z in lower case because the tr range stops at y; upper lazy should print LAZY.",
            source: (
                "upper() { printf '%s' \"$1\" | tr 'a-y' 'A-Y'; }\nlower() { printf '%s' \"$1\" | tr 'A-Z' 'a-z'; }\n",
                "upper() { printf '%s' \"$1\" | tr 'a-z' 'A-Z'; }\nlower() { printf '%s' \"$1\" | tr 'A-Z' 'a-z'; }\n",
            ),
            cases: vec![
                Case { name: "upper_basic", check: "[ \"$(upper abc)\" = \"ABC\" ]" },
                Case { name: "lower", check: "[ \"$(lower ABZ)\" = \"abz\" ]" },
            ],
            new_cases: vec![Case { name: "upper_z", check: "[ \"$(upper lazy)\" = \"LAZY\" ]" }],
            extra: vec![],
            fail_to_pass: vec!["tests/test_text.sh::upper_z"],
            pass_to_pass: vec!["tests/test_text.sh::lower", "tests/test_text.sh::upper_basic"],
        },
        ToySpec {
            id: "toy-max-3",
            module: "max",
            statement: "max in src/max.sh always returns its first argument, so max 2 9 prints 2 instead of the larger value 9.",
            source: (
                "max() {\n  if [ \"$1\" -gt \"$2\" ]; then\n    echo \"$1\"\n  else\n    echo \"$1\"\n  fi\n}\nmin() {\n  if [ \"$1\" -lt \"$2\" ]; then\n    echo \"$1\"\n  else\n    echo \"$2\"\n  fi\n}\n",
                "max() {\n  if [ \"$1\" -gt \"$2\" ]; then\n    echo \"$1\"\n  else\n    echo \"$2\"\n  fi\n}\nmin() {\n  if [ \"$1\" -lt \"$2\" ]; then\n    echo \"$1\"\n  else\n    echo \"$2\"\n  fi\n}\n",
            ),
            cases: vec![
                Case { name: "max_first", check: "[ \"$(max 5 3)\" = \"5\" ]" },
                Case { name: "min", check: "[ \"$(min 5 3)\" = \"3\" ]" },
            ],
            new_cases: vec![
                Case { name: "max_second", check: "[ \"$(max 2 9)\" = \"9\" ]" },
                Case { name: "max_equal", check: "[ \"$(max 4 4)\" = \"4\" ]" },
            ],
            extra: vec![],
            fail_to_pass: vec!["tests/test_max.sh::max_second"],
            pass_to_pass: vec![
                "tests/test_max.sh::max_equal",
                "tests/test_max.sh::max_first",
                "tests/test_max.sh::min",
            ],
        },
        ToySpec {
            id: "toy-greet-4",
            module: "greet",
            statement: "greet in src/greet.sh should end the greeting with an exclamation mark, printing Hello, Ada! for greet Ada, and the change should be noted.",
            source: (
                "greet() { echo \"Hello, $1\"; }\nbye() { echo \"Bye, $1.\"; }\n",
                "greet() { echo \"Hello, $1!\"; }\nbye() { echo \"Bye, $1.\"; }\n",
            ),
            cases: vec![Case { name: "bye", check: "[ \"$(bye Ada)\" = \"Bye, Ada.\" ]" }],
            new_cases: vec![Case { name: "greet", check: "[ \"$(greet Ada)\" = \"Hello, Ada!\" ]" }],
            extra: vec![("CHANGES.md", None, Some("- greet now ends with an exclamation mark\n"))],
            fail_to_pass: vec!["tests/test_greet.sh::greet"],
            pass_to_pass: vec!["tests/test_greet.sh::bye"],
        },
        ToySpec {
            id: "toy-docs-5",
            module: "fmt",
            statement: "pad in src/fmt.sh should left-pad numbers to three digits, but the gold change here only rewrites the README wording.",
            source: (
                "pad() { printf '%d' \"$1\"; }\nid() { printf '%s' \"$1\"; }\n",
                "pad() { printf '%d' \"$1\"; }\nid() { printf '%s' \"$1\"; }\n",
            ),
            cases: vec![Case { name: "id", check: "[ \"$(id 7)\" = \"7\" ]" }],
            new_cases: vec![Case { name: "pad", check: "[ \"$(pad 7)\" = \"007\" ]" }],
            extra: vec![("README.md", Some("fmt helpers\n"), Some("Formatting helpers.\n"))],
            fail_to_pass: vec![],
            pass_to_pass: vec!["tests/test_fmt.sh::id"],
        },
    ]
}

pub fn toy_runner() -> RunnerConfig {
    let mut r = RunnerConfig::new(vec!["sh".into(), "{file}".into(), "{case}".into()]);
    r.timeout_secs = 20.0;
    r.missing_exit_code = Some(TOY_MISSING_EXIT);
    r.discover = Some(vec![
        "sh".into(),
        "-c".into(),
        "for f in tests/test_*.sh; do sh \"$f\" --list; done".into(),
    ]);
    r
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub root: PathBuf,
    pub dataset_path: PathBuf,
    pub snapshots: PathBuf,
    pub dataset: Dataset,
}

fn write(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)
}

fn build(spec: &ToySpec, snapshots: &Path) -> std::io::Result<TaskInstance> {
    let snap = snapshots.join(spec.id);
    if snap.exists() {
        fs::remove_dir_all(&snap)?;
    }
    let src_path = format!("src/{}.sh", spec.module);
    let test_path = format!("tests/test_{}.sh", spec.module);
    write(&snap.join(&src_path), spec.source.0)?;
    let old_cases: Vec<&Case> = spec.cases.iter().collect();
    let all_cases: Vec<&Case> = spec.cases.iter().chain(&spec.new_cases).collect();
    let old_script = script(spec.module, &old_cases);
    let new_script = script(spec.module, &all_cases);
    write(&snap.join(&test_path), &old_script)?;
    for (path, before, _) in &spec.extra {
        if let Some(text) = before {
            write(&snap.join(path), text)?;
        }
    }

    let mut gold = diff_file(&src_path, Some(spec.source.0), Some(spec.source.1));
    for (path, before, after) in &spec.extra {
        gold.push_str(&diff_file(path, *before, *after));
    }
    let test_patch = diff_file(&test_path, Some(&old_script), Some(&new_script));
    let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    Ok(TaskInstance {
        instance_id: spec.id.to_string(),
        repo: format!("toy/{}", spec.module),
        base_commit: format!("{:0>40}", spec.id.len()),
        problem_statement: spec.statement.to_string(),
        gold_patch: gold,
        test_patch,
        fail_to_pass: set(&spec.fail_to_pass),
        pass_to_pass: set(&spec.pass_to_pass),
        version: "0.1.0".into(),
        created_at: Utc.with_ymd_and_hms(2024, 1, 15, 12, 0, 0).unwrap(),
        image_ref: None,
    })
}

/// Writes snapshots and `dataset.jsonl` under `root`.
pub fn write_corpus(root: &Path) -> std::io::Result<ToyCorpus> {
    let snapshots = root.join("snapshots");
    fs::create_dir_all(&snapshots)?;
    let instances = specs()
        .iter()
        .map(|s| build(s, &snapshots))
        .collect::<std::io::Result<Vec<_>>>()?;
    let dataset = Dataset {
        name: "toy".into(),
        split: Split::Raw,
        instances,
    };
    let dataset_path = root.join("dataset.jsonl");
    save_dataset(&dataset_path, &dataset).map_err(std::io::Error::other)?;
    Ok(ToyCorpus {
        root: root.to_path_buf(),
        dataset_path,
        snapshots,
        dataset,
    })
}

/// The four instances constructed to validate.
pub fn valid_ids() -> Vec<&'static str> {
    vec!["toy-calc-1", "toy-text-2", "toy-max-3", "toy-greet-4"]
}
