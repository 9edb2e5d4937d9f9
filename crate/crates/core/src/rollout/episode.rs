use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::agent::{Agent, AgentRequest, ObservationPayload};
use super::tokens::TokenEstimator;
use super::{Action, ActionKind, Observation, RolloutPolicy, Step, Termination, Trajectory};
use crate::diff::{ParseError, Patch};
use crate::sandbox::{Sandbox, SandboxError};
use crate::task::TaskInstance;

/// Search/replace edit: `old` must occur exactly once in `path`; an empty
/// `old` creates the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub path: String,
    #[serde(default)]
    pub old: String,
    pub new: String,
}

/// True iff some action is immediately repeated twice more.
pub fn detect_stuck_in_loop(actions: &[Action]) -> bool {
    let keys: Vec<_> = actions.iter().map(Action::key).collect();
    keys.windows(3).any(|w| w[0] == w[1] && w[1] == w[2])
}

/// True iff the diff contains no hunks. Blank or whitespace-only text and
/// header-only sections count as empty.
pub fn is_empty_patch(diff: &str) -> Result<bool, ParseError> {
    Ok(Patch::parse(diff)?.hunk_count() == 0)
}

/// Keeps the head and tail of `text` within `cap` bytes, marking the cut.
pub fn truncate_output(text: &str, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text.to_string(), false);
    }
    let half = cap / 2;
    let mut head_end = half;
    while !text.is_char_boundary(head_end) {
        head_end -= 1;
    }
    let mut tail_start = text.len() - half;
    while !text.is_char_boundary(tail_start) {
        tail_start += 1;
    }
    let elided = tail_start - head_end;
    (
        format!(
            "{}\n[... {elided} bytes elided ...]\n{}",
            &text[..head_end],
            &text[tail_start..]
        ),
        true,
    )
}

pub fn initial_observation(instance: &TaskInstance) -> Observation {
    Observation {
        turn_index: 0,
        content: format!(
            "Repository: {}\n\n{}",
            instance.repo, instance.problem_statement
        ),
        truncated: false,
    }
}

/// Executes one action, returning the tool result shown to the agent.
/// Action-level failures (bad edits, non-applying patches) are reported in
/// the text; only sandbox-level failures are errors.
fn execute(sb: &mut Sandbox, action: &Action, policy: &RolloutPolicy) -> Result<String, SandboxError> {
    match action.kind {
        ActionKind::Finish => Ok(String::new()),
        ActionKind::Command => {
            let argv = vec!["sh".to_string(), "-c".to_string(), action.payload.clone()];
            let r = sb.run_command(
                &argv,
                Duration::from_secs_f64(policy.command_timeout_secs),
                &BTreeMap::new(),
            )?;
            let mut out = if r.timed_out {
                format!("[timed out after {}s]\n", policy.command_timeout_secs)
            } else {
                format!("[exit code {}]\n", r.exit_code)
            };
            out.push_str(&r.stdout);
            if !r.stderr.is_empty() {
                out.push_str("[stderr]\n");
                out.push_str(&r.stderr);
            }
            Ok(out)
        }
        ActionKind::View => match sb.read_file(action.payload.trim()) {
            Ok(text) => Ok(text),
            Err(SandboxError::Closed(id)) => Err(SandboxError::Closed(id)),
            Err(e) => Ok(format!("[error] {e}")),
        },
        ActionKind::Edit => {
            let payload = action.payload.trim_start();
            let result = if payload.starts_with("diff --git") || payload.starts_with("--- ") {
                sb.apply_patch(&action.payload)
                    .map(|files| format!("[applied patch to {}]", files.join(", ")))
            } else {
                match serde_json::from_str::<EditSpec>(&action.payload) {
                    Ok(e) => sb
                        .replace_in_file(&e.path, &e.old, &e.new)
                        .map(|_| format!("[edited {}]", e.path)),
                    Err(e) => return Ok(format!("[error] malformed edit: {e}")),
                }
            };
            match result {
                Ok(msg) => Ok(msg),
                Err(SandboxError::Closed(id)) => Err(SandboxError::Closed(id)),
                Err(SandboxError::Io(e)) => Err(SandboxError::Io(e)),
                Err(e) => Ok(format!("[error] {e}")),
            }
        }
    }
}

/// Runs one episode of `agent` on `instance` inside `sb`. The sandbox is left
/// as the agent left it; `resolved` stays unset.
pub fn run_rollout(
    agent: &mut dyn Agent,
    instance: &TaskInstance,
    sb: &mut Sandbox,
    policy: &RolloutPolicy,
    trajectory_id: &str,
    attempt: usize,
    estimator: &dyn TokenEstimator,
) -> Trajectory {
    let temperature = policy.temperature_for(attempt);
    let mut steps: Vec<Step> = Vec::new();
    let mut tokens = 0usize;
    let mut error = None;
    let mut obs = initial_observation(instance);

    let termination = loop {
        if steps.len() >= policy.max_turns {
            break Termination::MaxTurns;
        }
        let request = AgentRequest {
            trajectory_id: trajectory_id.to_string(),
            turn: steps.len(),
            observation: ObservationPayload {
                content: obs.content.clone(),
                truncated: obs.truncated,
            },
            remaining_turns: policy.max_turns - steps.len(),
            remaining_tokens: policy.context_budget.saturating_sub(tokens),
            temperature,
        };
        tokens += estimator.count(&obs.content);
        let action = match agent.act(&request) {
            Ok(resp) => resp.into_action(),
            Err(e) => {
                error = Some(e.to_string());
                break Termination::EnvironmentError;
            }
        };
        tokens += estimator.count(if action.raw.is_empty() {
            &action.payload
        } else {
            &action.raw
        });
        let finished = action.kind == ActionKind::Finish;
        steps.push(Step {
            observation: obs.clone(),
            action: action.clone(),
        });
        if finished {
            break Termination::Finished;
        }
        let output = match execute(sb, &action, policy) {
            Ok(o) => o,
            Err(e) => {
                error = Some(e.to_string());
                break Termination::EnvironmentError;
            }
        };
        if tokens > policy.context_budget {
            break Termination::ContextBudget;
        }
        if policy.stop_on_loop && detect_stuck_in_loop(&steps[steps.len().saturating_sub(3)..].iter().map(|s| s.action.clone()).collect::<Vec<_>>()) {
            break Termination::LoopDetected;
        }
        let (content, truncated) = truncate_output(&output, policy.observation_cap);
        obs = Observation {
            turn_index: steps.len(),
            content,
            truncated,
        };
    };

    let final_patch = match sb.current_diff() {
        Ok(d) => d,
        Err(e) => {
            error.get_or_insert_with(|| e.to_string());
            String::new()
        }
    };
    let actions: Vec<Action> = steps.iter().map(|s| s.action.clone()).collect();
    Trajectory {
        trajectory_id: trajectory_id.to_string(),
        instance_id: instance.instance_id.clone(),
        repo: instance.repo.clone(),
        problem_statement: instance.problem_statement.clone(),
        attempt,
        policy_tag: agent.tag(),
        temperature,
        policy: policy.clone(),
        empty_patch: is_empty_patch(&final_patch).unwrap_or(true),
        stuck_in_loop: detect_stuck_in_loop(&actions),
        num_turns: steps.len(),
        num_tokens: tokens,
        steps,
        final_patch,
        resolved: None,
        termination,
        error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(kind: ActionKind, p: &str) -> Action {
        Action::new(kind, p)
    }

    #[test]
    fn loop_detection_examples() {
        let x = a(ActionKind::Command, "ls -la");
        let y = a(ActionKind::Command, "cat f");
        assert!(detect_stuck_in_loop(&[x.clone(), x.clone(), x.clone()]));
        assert!(!detect_stuck_in_loop(&[x.clone(), x.clone(), y.clone(), x.clone(), x.clone()]));
        assert!(!detect_stuck_in_loop(&[x.clone(), x.clone()]));
        assert!(!detect_stuck_in_loop(&[]));
        // Payload whitespace is normalized, raw text ignored.
        let mut x2 = a(ActionKind::Command, "  ls   -la ");
        x2.raw = "different reasoning".into();
        assert!(detect_stuck_in_loop(&[x.clone(), x2, x.clone()]));
        // Same payload, different kind.
        assert!(!detect_stuck_in_loop(&[x.clone(), a(ActionKind::View, "ls -la"), x]));
    }

    #[test]
    fn empty_patch_examples() {
        assert!(is_empty_patch("").unwrap());
        assert!(is_empty_patch("   \n\t\n").unwrap());
        assert!(is_empty_patch("diff --git a/x b/x\nold mode 100644\nnew mode 100755\n").unwrap());
        assert!(!is_empty_patch("--- a/x\n+++ b/x\n@@ -1 +1 @@\n-a\n+b\n").unwrap());
        assert!(is_empty_patch("--- a/x\n+++ b/x\n@@ -1 +1 @@\n").is_err());
    }

    #[test]
    fn truncation_keeps_head_and_tail() {
        let text = format!("{}{}", "h".repeat(100), "t".repeat(100));
        let (out, cut) = truncate_output(&text, 50);
        assert!(cut);
        assert!(out.starts_with(&"h".repeat(25)));
        assert!(out.ends_with(&"t".repeat(25)));
        assert!(out.contains("[... 150 bytes elided ...]"));
        assert_eq!(truncate_output("short", 50), ("short".to_string(), false));
        let (out, _) = truncate_output(&"é".repeat(40), 11);
        assert!(out.contains("elided"));
    }
}
