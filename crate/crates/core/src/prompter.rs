//! Controller prompt rendering and `<NextState>` reply parsing.
//!
//! The rendered text is the dataset wire format. Layout:
//!
//! * list sections (`TaskDescription`, `Instructions`, `Feedback`, `Code`,
//!   `Variables`, `StateHistory`, `StateCandidates`) render as
//!   `<Tag>\n` + one item per line + `</Tag>`, or `<Tag></Tag>` when empty;
//! * scalar sections (`Query`, `State`, `CurrentStep`) render inline;
//! * sections are joined by a single newline and the text has no trailing
//!   newline.
//!
//! `CurrentStep` shows the 1-based number of the decision being made, so the
//! decision at engine step `t` (after `t` transitions) renders `t + 1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{EntryKind, Snapshot, StateId};

/// System message sent ahead of the rendered memory.
pub const CONTROLLER_PREAMBLE: &str = "You are an AI assistant to control the state of a multi-step visual reasoning system. Your task is to decide the next state the system should transition to based on the current state and history.";

const CHOOSE_LINE: &str = "Based on the information above, determine the next state the system should transition to. Choose from the following states:";
const RETURN_LINE: &str = "Return the name wrapped in <NextState> tags.";

const OPEN_TAG: &str = "<NextState>";
const CLOSE_TAG: &str = "</NextState>";

/// Optional context-window limits. `None` keeps every entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub max_code_entries: Option<usize>,
    pub max_feedback_entries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerPrompt {
    pub text: String,
    pub candidates: Vec<StateId>,
    pub step: u32,
    /// Code and feedback entries dropped by [`PromptConfig`] limits.
    pub truncated_entries: usize,
}

fn list_section(out: &mut String, tag: &str, items: &[&str]) {
    out.push('<');
    out.push_str(tag);
    out.push('>');
    if !items.is_empty() {
        out.push('\n');
        for item in items {
            out.push_str(item.trim_end_matches('\n'));
            out.push('\n');
        }
    }
    out.push_str("</");
    out.push_str(tag);
    out.push_str(">\n");
}

fn inline_section(out: &mut String, tag: &str, body: &str) {
    out.push_str(&format!("<{tag}>{body}</{tag}>\n"));
}

fn keep_last<'a>(items: Vec<&'a str>, limit: Option<usize>, dropped: &mut usize) -> Vec<&'a str> {
    match limit {
        Some(k) if items.len() > k => {
            *dropped += items.len() - k;
            items[items.len() - k..].to_vec()
        }
        _ => items,
    }
}

/// Renders the controller prompt for a decision at engine step `step`.
pub fn render_prompt(
    memory: &Snapshot,
    current: StateId,
    step: u32,
    candidates: &[StateId],
    config: &PromptConfig,
) -> ControllerPrompt {
    let mut dropped = 0;
    let task: Vec<&str> = memory.texts(EntryKind::TaskDescription).collect();
    let query = memory.texts(EntryKind::Query).last().unwrap_or("");
    let instructions: Vec<&str> = memory.texts(EntryKind::Instruction).collect();
    let feedback = keep_last(memory.texts(EntryKind::Feedback).collect(), config.max_feedback_entries, &mut dropped);
    let code = keep_last(memory.texts(EntryKind::Code).collect(), config.max_code_entries, &mut dropped);
    let variables: Vec<String> = memory.variables().into_iter().map(|(n, v)| format!("{n}: {v}")).collect();
    let history = memory.state_history();

    let mut text = String::new();
    list_section(&mut text, "TaskDescription", &task);
    inline_section(&mut text, "Query", query);
    list_section(&mut text, "Instructions", &instructions);
    list_section(&mut text, "Feedback", &feedback);
    list_section(&mut text, "Code", &code);
    list_section(&mut text, "Variables", &variables.iter().map(String::as_str).collect::<Vec<_>>());
    list_section(&mut text, "StateHistory", &history.iter().map(|s| s.wire_name()).collect::<Vec<_>>());
    inline_section(&mut text, "State", current.wire_name());
    inline_section(&mut text, "CurrentStep", &(step + 1).to_string());
    text.push_str(CHOOSE_LINE);
    text.push('\n');
    list_section(&mut text, "StateCandidates", &candidates.iter().map(|s| s.wire_name()).collect::<Vec<_>>());
    text.push_str(RETURN_LINE);

    ControllerPrompt { text, candidates: candidates.to_vec(), step, truncated_entries: dropped }
}

/// Completion text that selects `state`.
pub fn render_reply(state: StateId) -> String {
    format!("{OPEN_TAG}{}{CLOSE_TAG}", state.wire_name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    MissingTag,
    MultipleTags,
    UnknownName,
    NotACandidate,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::MissingTag => "missing_tag",
            InvalidReason::MultipleTags => "multiple_tags",
            InvalidReason::UnknownName => "unknown_name",
            InvalidReason::NotACandidate => "not_a_candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidReply {
    pub reason: InvalidReason,
    pub detail: String,
}

impl fmt::Display for InvalidReply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.reason.as_str(), self.detail)
    }
}

fn tag_spans(raw: &str) -> Vec<&str> {
    let mut spans = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find(OPEN_TAG) {
        let after = &rest[open + OPEN_TAG.len()..];
        match after.find(CLOSE_TAG) {
            Some(close) => {
                spans.push(&after[..close]);
                rest = &after[close + CLOSE_TAG.len()..];
            }
            None => break,
        }
    }
    spans
}

/// Extracts the single `<NextState>` span and checks it against the offered
/// candidates. Text around the span is ignored.
pub fn parse_reply(raw: &str, prompt: &ControllerPrompt) -> Result<StateId, InvalidReply> {
    let spans = tag_spans(raw);
    let name = match spans.as_slice() {
        [] => {
            return Err(InvalidReply {
                reason: InvalidReason::MissingTag,
                detail: "no well-formed <NextState>...</NextState> span".into(),
            })
        }
        [one] => one.trim(),
        many => {
            return Err(InvalidReply {
                reason: InvalidReason::MultipleTags,
                detail: format!("{} <NextState> spans", many.len()),
            })
        }
    };
    let state = StateId::from_wire(name).map_err(|_| InvalidReply {
        reason: InvalidReason::UnknownName,
        detail: format!("{name:?} is not a state name"),
    })?;
    if !prompt.candidates.contains(&state) {
        return Err(InvalidReply {
            reason: InvalidReason::NotACandidate,
            detail: format!("{name} was not offered"),
        });
    }
    Ok(state)
}

/// Reads the `<StateCandidates>` block back out of a rendered prompt. Lines
/// that are not state names are skipped.
pub fn candidates_in_prompt(text: &str) -> Vec<StateId> {
    let open = "<StateCandidates>";
    let Some(start) = text.rfind(open) else {
        return Vec::new();
    };
    let body = &text[start + open.len()..];
    let body = &body[..body.find("</StateCandidates>").unwrap_or(body.len())];
    body.lines().filter_map(|l| StateId::from_wire(l.trim()).ok()).collect()
}

/// A prompt rebuilt from dataset text, for parsing replies against it.
pub fn prompt_from_text(text: impl Into<String>, step: u32) -> ControllerPrompt {
    let text = text.into();
    let candidates = candidates_in_prompt(&text);
    ControllerPrompt { text, candidates, step, truncated_entries: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MemoryDraft, MetricKind, SharedMemory, TaskSpec};
    use proptest::prelude::*;

    fn empty_memory() -> SharedMemory {
        SharedMemory::new(TaskSpec {
            title: "T".into(),
            description: "D".into(),
            query: "q".into(),
            image_ref: "i".into(),
            metric_kind: MetricKind::VqaAccuracy,
        })
    }

    const ALL4: [StateId; 4] = [StateId::Final, StateId::Specialized, StateId::Oneshot, StateId::Stepwise];

    #[test]
    fn empty_memory_renders_every_section() {
        let p = render_prompt(&empty_memory().snapshot(), StateId::Initial, 0, &StateId::AGENTS, &PromptConfig::default());
        for tag in [
            "TaskDescription", "Query", "Instructions", "Feedback", "Code", "Variables", "StateHistory", "State",
            "CurrentStep", "StateCandidates",
        ] {
            assert_eq!(p.text.matches(&format!("<{tag}>")).count(), 1, "{tag}");
            assert_eq!(p.text.matches(&format!("</{tag}>")).count(), 1, "{tag}");
        }
        assert!(p.text.contains("<Feedback></Feedback>\n<Code></Code>\n<Variables></Variables>"));
        assert!(p.text.contains("<CurrentStep>1</CurrentStep>"));
        assert!(p.text.contains("<StateCandidates>\nSpecialized\nOneShotReasoning\nStepWiseReasoning\n</StateCandidates>"));
    }

    #[test]
    fn variables_show_latest_binding_only() {
        let mut m = empty_memory();
        m.append(
            0,
            [
                MemoryDraft::variable(StateId::Stepwise, "x", "1"),
                MemoryDraft::variable(StateId::Stepwise, "y", "2"),
                MemoryDraft::variable(StateId::Stepwise, "x", "5"),
            ],
        )
        .unwrap();
        let p = render_prompt(&m.snapshot(), StateId::Stepwise, 1, &ALL4, &PromptConfig::default());
        assert!(p.text.contains("<Variables>\nx: 5\ny: 2\n</Variables>"), "{}", p.text);
    }

    #[test]
    fn truncation_keeps_recent_entries() {
        let mut m = empty_memory();
        m.append(0, (0..4).map(|i| MemoryDraft::feedback(StateId::Oneshot, format!("f{i}")))).unwrap();
        let cfg = PromptConfig { max_feedback_entries: Some(2), max_code_entries: None };
        let p = render_prompt(&m.snapshot(), StateId::Oneshot, 1, &ALL4, &cfg);
        assert!(p.text.contains("<Feedback>\nf2\nf3\n</Feedback>"));
        assert_eq!(p.truncated_entries, 2);
    }

    #[test]
    fn candidates_read_back() {
        let p = render_prompt(&empty_memory().snapshot(), StateId::Stepwise, 3, &ALL4, &PromptConfig::default());
        assert_eq!(candidates_in_prompt(&p.text), ALL4);
        assert_eq!(prompt_from_text(p.text.clone(), 3), p);
        assert!(candidates_in_prompt("no block").is_empty());
    }

    #[test]
    fn parse_examples() {
        let p = render_prompt(&empty_memory().snapshot(), StateId::Stepwise, 3, &ALL4, &PromptConfig::default());
        assert_eq!(parse_reply("<NextState>StepWiseReasoning</NextState>", &p), Ok(StateId::Stepwise));
        assert_eq!(parse_reply("I choose <NextState>Final</NextState> because done.", &p), Ok(StateId::Final));
        assert_eq!(parse_reply("<NextState>Stepwise</NextState>", &p).unwrap_err().reason, InvalidReason::UnknownName);
        assert_eq!(parse_reply("Final", &p).unwrap_err().reason, InvalidReason::MissingTag);
        assert_eq!(parse_reply("<NextState>Final", &p).unwrap_err().reason, InvalidReason::MissingTag);
        assert_eq!(
            parse_reply("<NextState>Final</NextState><NextState>Final</NextState>", &p).unwrap_err().reason,
            InvalidReason::MultipleTags
        );
        let p0 = render_prompt(&empty_memory().snapshot(), StateId::Initial, 0, &StateId::AGENTS, &PromptConfig::default());
        assert_eq!(parse_reply("<NextState>Final</NextState>", &p0).unwrap_err().reason, InvalidReason::NotACandidate);
        assert_eq!(parse_reply("<NextState>Initial</NextState>", &p0).unwrap_err().reason, InvalidReason::NotACandidate);
    }

    proptest! {
        #[test]
        fn render_parse_coherence(mask in prop::collection::vec(any::<bool>(), 4), step in 0u32..20) {
            let cands: Vec<StateId> = ALL4.iter().zip(&mask).filter(|(_, m)| **m).map(|(s, _)| *s).collect();
            prop_assume!(!cands.is_empty());
            let snap = empty_memory().snapshot();
            let p = render_prompt(&snap, StateId::Oneshot, step, &cands, &PromptConfig::default());
            let again = render_prompt(&snap, StateId::Oneshot, step, &cands, &PromptConfig::default());
            prop_assert_eq!(&p.text, &again.text);
            for c in &cands {
                prop_assert_eq!(parse_reply(&render_reply(*c), &p), Ok(*c));
                let line = format!("\n{}\n", c.wire_name());
                prop_assert!(p.text.contains(&line));
            }
        }
    }
}
