//! Agent-environment episodes: the observation/action loop, termination
//! rules, loop and empty-patch detection, and the parallel batch scheduler.

mod agent;
mod batch;
mod episode;
mod tokens;

use serde::{Deserialize, Serialize};

pub use agent::{
    AGENT_TIMEOUT,
    Agent, AgentError, AgentRequest, AgentResponse, AgentSpec, ExecAgent, GoldPatchAgent, HttpAgent,
    LoopAgent, NoopAgent, ObservationPayload, ScriptedAgent, WireAction,
};
pub use batch::{run_batch, trajectory_id, BatchError, BatchOptions};
pub use episode::{
    detect_stuck_in_loop, initial_observation, is_empty_patch, run_rollout, truncate_output,
    EditSpec,
};
pub use tokens::{TokenEstimator, WhitespaceEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Command,
    Edit,
    View,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub payload: String,
    /// The agent's verbatim message.
    #[serde(default)]
    pub raw: String,
}

impl Action {
    pub fn new(kind: ActionKind, payload: impl Into<String>) -> Self {
        let payload = payload.into();
        Self {
            kind,
            raw: payload.clone(),
            payload,
        }
    }

    /// Identity used for loop detection: kind plus whitespace-normalized
    /// payload. The raw message is not part of it.
    pub fn key(&self) -> (ActionKind, String) {
        (
            self.kind,
            self.payload.split_whitespace().collect::<Vec<_>>().join(" "),
        )
    }

    pub fn same_as(&self, other: &Action) -> bool {
        self.key() == other.key()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub turn_index: usize,
    pub content: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Finished,
    MaxTurns,
    ContextBudget,
    /// Early stop on three identical consecutive actions (opt-in).
    LoopDetected,
    EnvironmentError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutPolicy {
    pub max_turns: usize,
    pub context_budget: usize,
    pub temperature: f64,
    pub attempts_per_instance: usize,
    /// Sample the first attempt of each instance at temperature 0.
    #[serde(default)]
    pub first_attempt_greedy: bool,
    /// Stop an episode as soon as it is stuck in a loop.
    #[serde(default)]
    pub stop_on_loop: bool,
    /// Per-turn cap on tool output bytes shown to the agent.
    #[serde(default = "default_observation_cap")]
    pub observation_cap: usize,
    #[serde(default = "default_command_timeout")]
    pub command_timeout_secs: f64,
}

fn default_observation_cap() -> usize {
    16 * 1024
}

fn default_command_timeout() -> f64 {
    120.0
}

impl Default for RolloutPolicy {
    fn default() -> Self {
        Self::with_max_turns(30)
    }
}

impl RolloutPolicy {
    /// The 30 / 50 / 100 turn presets use this with the 32k-token budget.
    pub fn with_max_turns(max_turns: usize) -> Self {
        Self {
            max_turns,
            context_budget: 32_768,
            temperature: 0.0,
            attempts_per_instance: 1,
            first_attempt_greedy: false,
            stop_on_loop: false,
            observation_cap: default_observation_cap(),
            command_timeout_secs: default_command_timeout(),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.max_turns < 1 {
            return Err("max_turns must be at least 1".into());
        }
        if self.context_budget == 0 {
            return Err("context_budget must be positive".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err("temperature must be a non-negative number".into());
        }
        if self.attempts_per_instance < 1 {
            return Err("attempts_per_instance must be at least 1".into());
        }
        Ok(())
    }

    pub fn temperature_for(&self, attempt: usize) -> f64 {
        if attempt == 0 && self.first_attempt_greedy {
            0.0
        } else {
            self.temperature
        }
    }
}

/// One recorded episode. Self-contained: it embeds the instance identity,
/// problem statement and policy so stores can be merged by directory union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub instance_id: String,
    pub repo: String,
    pub problem_statement: String,
    pub attempt: usize,
    pub policy_tag: String,
    pub temperature: f64,
    pub policy: RolloutPolicy,
    pub steps: Vec<Step>,
    pub final_patch: String,
    #[serde(default)]
    pub resolved: Option<bool>,
    pub empty_patch: bool,
    pub stuck_in_loop: bool,
    pub num_turns: usize,
    pub num_tokens: usize,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }
}
