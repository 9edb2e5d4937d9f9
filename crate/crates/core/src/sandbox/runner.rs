//! Per-test invocation and outcome classification.
//!
//! Each test identifier is run as its own command built from an argv
//! template. Placeholders: `{test_id}`, `{workdir}`, `{file}` (the part of the
//! identifier before `::`) and `{case}` (the part after it, or empty).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::exec::ExecResult;
use crate::task::TestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestOutcome {
    Pass,
    Fail,
    Error,
    Missing,
}

impl TestOutcome {
    pub fn is_pass(self) -> bool {
        self == TestOutcome::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerConfig {
    pub argv: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Exit code the test command uses for "no such test".
    #[serde(default)]
    pub missing_exit_code: Option<i32>,
    /// Exit codes meaning the test could not run (collection error, crash).
    #[serde(default = "default_error_codes")]
    pub error_exit_codes: Vec<i32>,
    /// Report an identifier as missing when its `{file}` part is not a file
    /// in the workdir.
    #[serde(default = "default_true")]
    pub require_file: bool,
    /// Optional command printing one test identifier per line.
    #[serde(default)]
    pub discover: Option<Vec<String>>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_error_codes() -> Vec<i32> {
    vec![126, 127]
}

fn default_true() -> bool {
    true
}

impl RunnerConfig {
    pub fn new(argv: Vec<String>) -> Self {
        Self {
            argv,
            timeout_secs: default_timeout(),
            env: BTreeMap::new(),
            missing_exit_code: None,
            error_exit_codes: default_error_codes(),
            require_file: true,
            discover: None,
        }
    }

    pub fn render(&self, test_id: &str, workdir: &str) -> Vec<String> {
        let (file, case) = split_test_id(test_id);
        self.argv
            .iter()
            .map(|a| {
                a.replace("{test_id}", test_id)
                    .replace("{workdir}", workdir)
                    .replace("{file}", file)
                    .replace("{case}", case)
            })
            .collect()
    }

    pub fn classify(&self, res: &ExecResult) -> TestOutcome {
        if res.timed_out || self.error_exit_codes.contains(&res.exit_code) || res.exit_code >= 128 {
            TestOutcome::Error
        } else if res.exit_code == 0 {
            TestOutcome::Pass
        } else if self.missing_exit_code == Some(res.exit_code) {
            TestOutcome::Missing
        } else {
            TestOutcome::Fail
        }
    }
}

pub fn split_test_id(test_id: &str) -> (&str, &str) {
    test_id.split_once("::").unwrap_or((test_id, ""))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub results: BTreeMap<TestId, TestOutcome>,
    /// Raw command results for each test that was actually invoked.
    pub raw: BTreeMap<TestId, ExecResult>,
}

impl TestReport {
    pub fn passed(&self, test: &str) -> bool {
        self.results.get(test).is_some_and(|o| o.is_pass())
    }

    pub fn passing(&self) -> BTreeSet<TestId> {
        self.results
            .iter()
            .filter(|(_, o)| o.is_pass())
            .map(|(t, _)| t.clone())
            .collect()
    }

    pub fn count_passed<'a>(&self, tests: impl IntoIterator<Item = &'a TestId>) -> usize {
        tests.into_iter().filter(|t| self.passed(t)).count()
    }
}
