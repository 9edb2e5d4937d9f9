//! Verifier input documents.
//!
//! A document is a sequence of sections, each opened by a sentinel line such
//! as `<<<TASK>>>` or `<<<STEP 3 ACTION>>>`. Content lines that could be
//! mistaken for a sentinel (or that start with the escape character) get a
//! leading backslash, so documents parse back exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{Action, ActionKind, TokenEstimator, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocStyle {
    Interleaved,
    ParsedContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
}

impl Label {
    pub fn from_resolved(resolved: bool) -> Self {
        if resolved {
            Label::Yes
        } else {
            Label::No
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Label::Yes => "<YES>",
            Label::No => "<NO>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierDocument {
    pub trajectory_id: String,
    pub style: DocStyle,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// A piece of code or output the agent looked at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpan {
    pub source: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Section {
    Task,
    Observation(usize),
    Action(usize),
    Elided(usize),
    FinalDiff,
    Context(usize, String),
    Patch,
    Judgement,
}

impl Section {
    fn header(&self) -> String {
        match self {
            Section::Task => "<<<TASK>>>".into(),
            Section::Observation(n) => format!("<<<STEP {n} OBSERVATION>>>"),
            Section::Action(n) => format!("<<<STEP {n} ACTION>>>"),
            Section::Elided(n) => format!("<<<ELIDED {n} STEPS>>>"),
            Section::FinalDiff => "<<<FINAL DIFF>>>".into(),
            Section::Context(n, src) => format!("<<<CONTEXT {n}: {src}>>>"),
            Section::Patch => "<<<PATCH>>>".into(),
            Section::Judgement => "<<<JUDGEMENT>>>".into(),
        }
    }

    fn parse_header(line: &str) -> Option<Section> {
        let inner = line.strip_prefix("<<<")?.strip_suffix(">>>")?;
        match inner {
            "TASK" => return Some(Section::Task),
            "FINAL DIFF" => return Some(Section::FinalDiff),
            "PATCH" => return Some(Section::Patch),
            "JUDGEMENT" => return Some(Section::Judgement),
            _ => {}
        }
        if let Some(rest) = inner.strip_prefix("STEP ") {
            let (n, what) = rest.split_once(' ')?;
            let n = n.parse().ok()?;
            return match what {
                "OBSERVATION" => Some(Section::Observation(n)),
                "ACTION" => Some(Section::Action(n)),
                _ => None,
            };
        }
        if let Some(rest) = inner.strip_prefix("ELIDED ") {
            return Some(Section::Elided(rest.strip_suffix(" STEPS")?.parse().ok()?));
        }
        if let Some(rest) = inner.strip_prefix("CONTEXT ") {
            let (n, src) = rest.split_once(": ")?;
            return Some(Section::Context(n.parse().ok()?, src.to_string()));
        }
        None
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("line {0}: content before the first section")]
    NoSection(usize),
    #[error("line {0}: unknown sentinel `{1}`")]
    UnknownSentinel(usize, String),
}

fn push_section(out: &mut String, section: &Section, content: &str) {
    out.push_str(&section.header());
    out.push('\n');
    for line in content.split('\n') {
        if line.starts_with('\\') || line.starts_with("<<<") {
            out.push('\\');
        }
        out.push_str(line);
        out.push('\n');
    }
}

fn section_text(section: &Section, content: &str) -> String {
    let mut s = String::new();
    push_section(&mut s, section, content);
    s
}

/// Splits a document back into its sections and unescaped contents.
pub fn parse_document(text: &str) -> Result<Vec<(Section, String)>, RenderError> {
    let mut out: Vec<(Section, Vec<&str>)> = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    for (i, line) in body.split('\n').enumerate() {
        if line.starts_with("<<<") {
            let s = Section::parse_header(line)
                .ok_or_else(|| RenderError::UnknownSentinel(i + 1, line.to_string()))?;
            out.push((s, Vec::new()));
        } else {
            let line = line.strip_prefix('\\').unwrap_or(line);
            out.last_mut().ok_or(RenderError::NoSection(i + 1))?.1.push(line);
        }
    }
    Ok(out.into_iter().map(|(s, lines)| (s, lines.join("\n"))).collect())
}

/// Text shown for an action: the agent's message, or `kind: payload` when
/// no message was recorded.
pub fn render_action(a: &Action) -> String {
    if !a.raw.is_empty() {
        return a.raw.clone();
    }
    let kind = match a.kind {
        ActionKind::Command => "command",
        ActionKind::Edit => "edit",
        ActionKind::View => "view",
        ActionKind::Finish => "finish",
    };
    format!("{kind}: {}", a.payload)
}

/// Task, then each observation/action pair, then the final diff and the
/// label when given.
pub fn render_interleaved(traj: &Trajectory, final_diff: &str, label: Option<Label>) -> VerifierDocument {
    render_interleaved_capped(traj, final_diff, label, usize::MAX, &NoTokens)
}

struct NoTokens;

impl TokenEstimator for NoTokens {
    fn count(&self, _: &str) -> usize {
        0
    }
}

/// Like [`render_interleaved`], but when the document would exceed
/// `token_cap` the middle steps are replaced by an elision marker. The first
/// and last steps are always kept; the remaining room goes to the most
/// recent steps.
pub fn render_interleaved_capped(
    traj: &Trajectory,
    final_diff: &str,
    label: Option<Label>,
    token_cap: usize,
    estimator: &dyn TokenEstimator,
) -> VerifierDocument {
    let head = section_text(&Section::Task, &traj.problem_statement);
    let mut tail = section_text(&Section::FinalDiff, final_diff);
    if let Some(l) = label {
        push_section(&mut tail, &Section::Judgement, l.token());
    }
    let steps: Vec<String> = traj
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut t = section_text(&Section::Observation(i + 1), &s.observation.content);
            push_section(&mut t, &Section::Action(i + 1), &render_action(&s.action));
            t
        })
        .collect();
    let n = steps.len();
    let mut keep = vec![true; n];
    let whole = || format!("{head}{}{tail}", steps.concat());
    if n > 2 && token_cap != usize::MAX && estimator.count(&whole()) > token_cap {
        let cost: Vec<usize> = steps.iter().map(|s| estimator.count(s)).collect();
        let fixed = estimator.count(&head) + estimator.count(&tail);
        keep = vec![false; n];
        keep[0] = true;
        keep[n - 1] = true;
        let mut used = fixed + cost[0] + cost[n - 1];
        for i in (1..n - 1).rev() {
            if used + cost[i] > token_cap {
                break;
            }
            used += cost[i];
            keep[i] = true;
        }
    }

    let mut text = head;
    let mut i = 0;
    while i < n {
        if keep[i] {
            text.push_str(&steps[i]);
            i += 1;
        } else {
            let start = i;
            while i < n && !keep[i] {
                i += 1;
            }
            text.push_str(&section_text(&Section::Elided(i - start), ""));
        }
    }
    text.push_str(&tail);
    VerifierDocument {
        trajectory_id: traj.trajectory_id.clone(),
        style: DocStyle::Interleaved,
        text,
        label,
    }
}

/// Task, then context spans in order, then the patch and the label when
/// given.
pub fn render_parsed_context(
    trajectory_id: &str,
    task: &str,
    spans: &[ContextSpan],
    patch: &str,
    label: Option<Label>,
) -> VerifierDocument {
    let mut text = section_text(&Section::Task, task);
    for (i, span) in spans.iter().enumerate() {
        let source = span.source.replace(['\n', '\r'], " ").replace(">>>", "> > >");
        push_section(&mut text, &Section::Context(i + 1, source), &span.text);
    }
    push_section(&mut text, &Section::Patch, patch);
    if let Some(l) = label {
        push_section(&mut text, &Section::Judgement, l.token());
    }
    VerifierDocument {
        trajectory_id: trajectory_id.to_string(),
        style: DocStyle::ParsedContext,
        text,
        label,
    }
}

/// The files the agent viewed, with the content it saw, in step order.
pub fn context_from_trajectory(traj: &Trajectory) -> Vec<ContextSpan> {
    traj.steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.action.kind == ActionKind::View)
        .filter_map(|(i, s)| {
            let seen = traj.steps.get(i + 1)?;
            Some(ContextSpan {
                source: s.action.payload.trim().to_string(),
                text: seen.observation.content.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escaping_round_trips() {
        let doc = render_parsed_context(
            "t",
            "<<<PATCH>>>\n\\x\n",
            &[ContextSpan {
                source: "a.py".into(),
                text: "".into(),
            }],
            "",
            Some(Label::No),
        );
        let parsed = parse_document(&doc.text).unwrap();
        assert_eq!(
            parsed,
            vec![
                (Section::Task, "<<<PATCH>>>\n\\x\n".to_string()),
                (Section::Context(1, "a.py".into()), String::new()),
                (Section::Patch, String::new()),
                (Section::Judgement, "<NO>".into()),
            ]
        );
    }

    #[test]
    fn unknown_sentinel_is_reported() {
        assert_eq!(
            parse_document("<<<TASK>>>\nx\n<<<NOPE>>>\n"),
            Err(RenderError::UnknownSentinel(3, "<<<NOPE>>>".into()))
        );
        assert_eq!(parse_document("x\n"), Err(RenderError::NoSection(1)));
    }
}
