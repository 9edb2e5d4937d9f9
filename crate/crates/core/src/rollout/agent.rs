//! Agent sessions and the per-turn wire protocol.
//!
//! Each turn the environment sends one request object and the agent answers
//! with one response object. Over stdio these are single JSON lines; over
//! HTTP each request is the body of a POST.
//!
//! ```text
//! -> {"trajectory_id":"..","turn":0,"observation":{"content":"..","truncated":false},
//!     "remaining_turns":30,"remaining_tokens":32768,"temperature":0.0}
//! <- {"action":{"kind":"command","payload":"ls"},"raw":"let me look around"}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Action, ActionKind};
use crate::task::TaskInstance;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent spawn failed: {0}")]
    Spawn(String),
    #[error("agent protocol violation: {0}")]
    Protocol(String),
    #[error("agent transport error: {0}")]
    Transport(String),
    #[error("invalid agent spec `{0}`")]
    BadSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPayload {
    pub content: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub trajectory_id: String,
    pub turn: usize,
    pub observation: ObservationPayload,
    pub remaining_turns: usize,
    pub remaining_tokens: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireAction {
    pub kind: ActionKind,
    #[serde(default)]
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub action: WireAction,
    #[serde(default)]
    pub raw: String,
}

impl AgentResponse {
    pub fn of(action: Action) -> Self {
        Self {
            action: WireAction {
                kind: action.kind,
                payload: action.payload,
            },
            raw: action.raw,
        }
    }

    pub fn into_action(self) -> Action {
        Action {
            kind: self.action.kind,
            payload: self.action.payload,
            raw: self.raw,
        }
    }
}

/// One agent session, used by exactly one rollout.
pub trait Agent: Send {
    fn tag(&self) -> String;
    fn act(&mut self, request: &AgentRequest) -> Result<AgentResponse, AgentError>;
}

/// Applies the instance's gold patch, then finishes. Reference oracle only.
pub struct GoldPatchAgent {
    patch: String,
    sent: bool,
}

impl GoldPatchAgent {
    pub fn new(instance: &TaskInstance) -> Self {
        Self {
            patch: instance.gold_patch.clone(),
            sent: false,
        }
    }
}

impl Agent for GoldPatchAgent {
    fn tag(&self) -> String {
        "gold-patch".into()
    }

    fn act(&mut self, _: &AgentRequest) -> Result<AgentResponse, AgentError> {
        if self.sent || self.patch.trim().is_empty() {
            return Ok(AgentResponse::of(Action::new(ActionKind::Finish, "done")));
        }
        self.sent = true;
        Ok(AgentResponse::of(Action::new(ActionKind::Edit, self.patch.clone())))
    }
}

pub struct NoopAgent;

impl Agent for NoopAgent {
    fn tag(&self) -> String {
        "noop".into()
    }

    fn act(&mut self, _: &AgentRequest) -> Result<AgentResponse, AgentError> {
        Ok(AgentResponse::of(Action::new(ActionKind::Finish, "")))
    }
}

/// Repeats one shell command forever.
pub struct LoopAgent {
    pub command: String,
}

impl Agent for LoopAgent {
    fn tag(&self) -> String {
        "loop".into()
    }

    fn act(&mut self, _: &AgentRequest) -> Result<AgentResponse, AgentError> {
        Ok(AgentResponse::of(Action::new(ActionKind::Command, self.command.clone())))
    }
}

/// Replays a fixed action list, then finishes.
pub struct ScriptedAgent {
    actions: std::vec::IntoIter<Action>,
}

impl ScriptedAgent {
    pub fn new(actions: Vec<Action>) -> Self {
        Self {
            actions: actions.into_iter(),
        }
    }

    /// Reads a JSON array of `{kind, payload, raw?}` objects, or JSON-Lines.
    pub fn load(path: &std::path::Path) -> Result<Vec<Action>, AgentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| AgentError::BadSpec(format!("{}: {e}", path.display())))?;
        let bad = |e: serde_json::Error| AgentError::BadSpec(format!("{}: {e}", path.display()));
        if text.trim_start().starts_with('[') {
            return serde_json::from_str(&text).map_err(bad);
        }
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(bad))
            .collect()
    }
}

impl Agent for ScriptedAgent {
    fn tag(&self) -> String {
        "scripted".into()
    }

    fn act(&mut self, _: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let next = self
            .actions
            .next()
            .unwrap_or_else(|| Action::new(ActionKind::Finish, ""));
        Ok(AgentResponse::of(next))
    }
}

/// A subprocess speaking the protocol as JSON lines on stdin/stdout.
pub struct ExecAgent {
    label: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl ExecAgent {
    pub fn spawn(argv: &[String], env: &[(String, String)], timeout: Duration) -> Result<Self, AgentError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| AgentError::BadSpec("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .envs(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| AgentError::Spawn(format!("{program}: {e}")))?;
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            label: argv.join(" "),
            stdin: child.stdin.take(),
            child,
            lines: rx,
            timeout,
        })
    }
}

impl Agent for ExecAgent {
    fn tag(&self) -> String {
        format!("exec:{}", self.label)
    }

    fn act(&mut self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| AgentError::Transport("stdin closed".into()))?;
        let line = serde_json::to_string(request).expect("request serializes");
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(AgentError::Transport(e.to_string())),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                return Err(AgentError::Transport("timed out waiting for a response".into()))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(AgentError::Protocol("agent closed its output".into()))
            }
        };
        serde_json::from_str(&reply).map_err(|e| AgentError::Protocol(format!("{e}: {reply}")))
    }
}

impl Drop for ExecAgent {
    fn drop(&mut self) {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One HTTP POST per turn.
pub struct HttpAgent {
    url: String,
    client: ureq::Agent,
}

impl HttpAgent {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let client = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            client,
        }
    }
}

impl Agent for HttpAgent {
    fn tag(&self) -> String {
        format!("http:{}", self.url)
    }

    fn act(&mut self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let mut resp = self
            .client
            .post(&self.url)
            .send_json(request)
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| AgentError::Protocol(format!("{e}: {body}")))
    }
}

/// How to start an agent session for each rollout.
///
/// String forms: `gold-patch`, `noop`, `loop` or `loop:<command>`,
/// `scripted:<file>`, `exec:<program> <args…>` (whitespace-split) and
/// `http:<url>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentSpec {
    GoldPatch,
    Noop,
    Loop { command: String },
    Scripted { path: PathBuf },
    Exec { argv: Vec<String> },
    Http { url: String },
}

pub const AGENT_TIMEOUT: Duration = Duration::from_secs(600);

impl AgentSpec {
    pub fn parse(spec: &str) -> Result<Self, AgentError> {
        let (head, rest) = match spec.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (spec, None),
        };
        match (head, rest) {
            ("gold-patch", None) => Ok(Self::GoldPatch),
            ("noop", None) => Ok(Self::Noop),
            ("loop", None) => Ok(Self::Loop {
                command: "ls".into(),
            }),
            ("loop", Some(c)) if !c.trim().is_empty() => Ok(Self::Loop { command: c.into() }),
            ("scripted", Some(p)) if !p.is_empty() => Ok(Self::Scripted { path: p.into() }),
            ("exec", Some(cmd)) if !cmd.trim().is_empty() => Ok(Self::Exec {
                argv: cmd.split_whitespace().map(str::to_string).collect(),
            }),
            // Both `http:http://host/act` and a bare `http://host/act`.
            ("http", Some(r)) if r.starts_with("//") => Ok(Self::Http { url: spec.to_string() }),
            ("http", Some(r)) if !r.is_empty() => Ok(Self::Http { url: r.to_string() }),
            _ => Err(AgentError::BadSpec(spec.to_string())),
        }
    }

    /// Checks that sessions can be started at all.
    pub fn preflight(&self) -> Result<(), AgentError> {
        match self {
            Self::Scripted { path } => ScriptedAgent::load(path).map(|_| ()),
            Self::Exec { argv } => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::null())
                    .stdout(Stdio::null())
                    .stderr(Stdio::null())
                    .spawn()
                    .map_err(|e| AgentError::Spawn(format!("{}: {e}", argv[0])))?;
                let _ = child.kill();
                let _ = child.wait();
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn start(&self, instance: &TaskInstance, seed: u64) -> Result<Box<dyn Agent>, AgentError> {
        Ok(match self {
            Self::GoldPatch => Box::new(GoldPatchAgent::new(instance)),
            Self::Noop => Box::new(NoopAgent),
            Self::Loop { command } => Box::new(LoopAgent {
                command: command.clone(),
            }),
            Self::Scripted { path } => Box::new(ScriptedAgent::new(ScriptedAgent::load(path)?)),
            Self::Exec { argv } => Box::new(ExecAgent::spawn(
                argv,
                &[
                    ("GYM_INSTANCE_ID".into(), instance.instance_id.clone()),
                    ("GYM_SEED".into(), seed.to_string()),
                ],
                AGENT_TIMEOUT,
            )?),
            Self::Http { url } => Box::new(HttpAgent::new(url.clone(), AGENT_TIMEOUT)),
        })
    }
}

impl std::fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::GoldPatch => write!(f, "gold-patch"),
            Self::Noop => write!(f, "noop"),
            Self::Loop { command } => write!(f, "loop:{command}"),
            Self::Scripted { path } => write!(f, "scripted:{}", path.display()),
            Self::Exec { argv } => write!(f, "exec:{}", argv.join(" ")),
            Self::Http { url } => write!(f, "http:{url}"),
        }
    }
}
