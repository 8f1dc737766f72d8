//! Append-only shared memory.
//!
//! Every agent cycle reads an immutable [`Snapshot`] and returns a list of
//! [`MemoryDraft`]s; only the episode loop appends them, assigning `seq` and
//! `step`. Snapshots share storage with the memory they came from and are
//! never affected by later appends.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::answer::{AnswerValue, TaskSpec};
use super::state::StateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Query,
    TaskDescription,
    Feedback,
    Code,
    Variable,
    Instruction,
    StateTransition,
    Answer,
}

impl EntryKind {
    pub const ALL: [EntryKind; 8] = [
        EntryKind::Query,
        EntryKind::TaskDescription,
        EntryKind::Feedback,
        EntryKind::Code,
        EntryKind::Variable,
        EntryKind::Instruction,
        EntryKind::StateTransition,
        EntryKind::Answer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Query => "query",
            EntryKind::TaskDescription => "task_description",
            EntryKind::Feedback => "feedback",
            EntryKind::Code => "code",
            EntryKind::Variable => "variable",
            EntryKind::Instruction => "instruction",
            EntryKind::StateTransition => "state_transition",
            EntryKind::Answer => "answer",
        }
    }
}

impl FromStr for EntryKind {
    type Err = MemoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntryKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MemoryError::UnknownKind(s.to_string()))
    }
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who wrote an entry: an agent/lifecycle state, or the engine itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Author {
    System,
    State(StateId),
}

impl Serialize for Author {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Author::System => serializer.serialize_str("system"),
            Author::State(s) => serializer.serialize_str(s.wire_name()),
        }
    }
}

impl<'de> Deserialize<'de> for Author {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        if raw == "system" {
            return Ok(Author::System);
        }
        StateId::from_wire(&raw).map(Author::State).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Text(String),
    Variable { name: String, value: String },
    Answer(AnswerValue),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub seq: u64,
    pub author: Author,
    pub kind: EntryKind,
    pub payload: Payload,
    pub step: u32,
}

impl MemoryEntry {
    pub fn text(&self) -> Option<&str> {
        match &self.payload {
            Payload::Text(t) => Some(t),
            _ => None,
        }
    }
}

/// An entry that has not been appended yet (no `seq`, no `step`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDraft {
    pub author: Author,
    pub kind: EntryKind,
    pub payload: Payload,
}

impl MemoryDraft {
    pub fn new(author: Author, kind: EntryKind, payload: Payload) -> Self {
        MemoryDraft { author, kind, payload }
    }

    /// Builds a draft from an untyped kind name, as received from a remote backend.
    pub fn parse(author: Author, kind: &str, payload: Payload) -> Result<Self, MemoryError> {
        Ok(MemoryDraft::new(author, kind.parse()?, payload))
    }

    fn text(author: Author, kind: EntryKind, text: impl Into<String>) -> Self {
        MemoryDraft::new(author, kind, Payload::Text(text.into()))
    }

    pub fn feedback(author: StateId, text: impl Into<String>) -> Self {
        MemoryDraft::text(Author::State(author), EntryKind::Feedback, text)
    }

    pub fn code(author: StateId, code: impl Into<String>) -> Self {
        MemoryDraft::text(Author::State(author), EntryKind::Code, code)
    }

    pub fn instruction(author: StateId, text: impl Into<String>) -> Self {
        MemoryDraft::text(Author::State(author), EntryKind::Instruction, text)
    }

    pub fn variable(author: StateId, name: impl Into<String>, value: impl Into<String>) -> Self {
        MemoryDraft::new(
            Author::State(author),
            EntryKind::Variable,
            Payload::Variable { name: name.into(), value: value.into() },
        )
    }

    pub fn answer(author: StateId, answer: AnswerValue) -> Self {
        MemoryDraft::new(Author::State(author), EntryKind::Answer, Payload::Answer(answer))
    }

    pub fn transition(to: StateId) -> Self {
        MemoryDraft::text(Author::System, EntryKind::StateTransition, to.wire_name())
    }

    pub fn query(text: impl Into<String>) -> Self {
        MemoryDraft::text(Author::System, EntryKind::Query, text)
    }

    pub fn task_description(text: impl Into<String>) -> Self {
        MemoryDraft::text(Author::System, EntryKind::TaskDescription, text)
    }

    fn check(&self) -> Result<(), MemoryError> {
        let ok = match (&self.kind, &self.payload) {
            (EntryKind::Variable, Payload::Variable { .. }) => true,
            (EntryKind::Answer, Payload::Answer(a)) => {
                a.validate().map_err(|e| MemoryError::InvalidDraftAnswer(e.to_string()))?;
                true
            }
            (EntryKind::StateTransition, Payload::Text(t)) => {
                StateId::from_wire(t).map_err(|e| MemoryError::InvalidTransition(e.0))?;
                true
            }
            (EntryKind::Variable | EntryKind::Answer, _) => false,
            (_, Payload::Text(_)) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(MemoryError::PayloadMismatch { kind: self.kind })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("unknown memory entry kind {0:?}")]
    UnknownKind(String),
    #[error("payload shape does not match entry kind {kind}")]
    PayloadMismatch { kind: EntryKind },
    #[error("answer draft is invalid: {0}")]
    InvalidDraftAnswer(String),
    #[error("state transition names unknown state {0:?}")]
    InvalidTransition(String),
    #[error("answer entry seq {seq} is malformed: {reason}")]
    MalformedAnswer { seq: u64, reason: String },
}

/// Immutable view of memory at some seq. Cheap to clone and share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    task: Arc<TaskSpec>,
    entries: Arc<Vec<MemoryEntry>>,
}

impl Snapshot {
    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn of_kind(&self, kind: EntryKind) -> impl Iterator<Item = &MemoryEntry> + '_ {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    /// Payload texts of every entry of `kind`, in seq order.
    pub fn texts(&self, kind: EntryKind) -> impl Iterator<Item = &str> + '_ {
        self.of_kind(kind).filter_map(MemoryEntry::text)
    }

    /// Latest binding per variable name, in first-definition order.
    pub fn variables(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<(&str, &str)> = Vec::new();
        for e in self.of_kind(EntryKind::Variable) {
            if let Payload::Variable { name, value } = &e.payload {
                match out.iter_mut().find(|(n, _)| *n == name.as_str()) {
                    Some(slot) => slot.1 = value,
                    None => out.push((name, value)),
                }
            }
        }
        out
    }

    pub fn variable(&self, name: &str) -> Option<&str> {
        self.variables().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// Every state entered so far, `Initial` included.
    pub fn state_history(&self) -> Vec<StateId> {
        self.texts(EntryKind::StateTransition)
            .filter_map(|t| StateId::from_wire(t).ok())
            .collect()
    }

    /// Resumes an appendable memory from this checkpoint.
    pub fn to_memory(&self) -> SharedMemory {
        SharedMemory { task: self.task.clone(), entries: self.entries.clone() }
    }

    /// Bytes of the canonical JSON serialization (used for replay comparisons).
    pub fn fingerprint(&self) -> Vec<u8> {
        serde_json::to_vec(self.entries()).expect("memory entries serialize")
    }
}

/// Output function: the last `answer` entry, parsed. `None` if there is none.
pub fn extract_answer(memory: &Snapshot) -> Result<Option<AnswerValue>, MemoryError> {
    let Some(entry) = memory.of_kind(EntryKind::Answer).last() else {
        return Ok(None);
    };
    match &entry.payload {
        Payload::Answer(a) => a
            .validate()
            .map(|_| Some(a.clone()))
            .map_err(|e| MemoryError::MalformedAnswer { seq: entry.seq, reason: e.to_string() }),
        _ => Err(MemoryError::MalformedAnswer {
            seq: entry.seq,
            reason: "payload is not an answer value".to_string(),
        }),
    }
}

/// The episode log. Confined to one episode; see [`Snapshot`] for sharing.
#[derive(Debug, Clone)]
pub struct SharedMemory {
    task: Arc<TaskSpec>,
    entries: Arc<Vec<MemoryEntry>>,
}

impl SharedMemory {
    pub fn new(task: TaskSpec) -> Self {
        SharedMemory { task: Arc::new(task), entries: Arc::new(Vec::new()) }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seq that the next appended entry will receive.
    pub fn next_seq(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { task: self.task.clone(), entries: self.entries.clone() }
    }

    /// Appends `delta` in order at episode step `step` and returns the next seq.
    /// Either every draft is appended or none is.
    pub fn append(&mut self, step: u32, delta: impl IntoIterator<Item = MemoryDraft>) -> Result<u64, MemoryError> {
        let delta: Vec<MemoryDraft> = delta.into_iter().collect();
        for d in &delta {
            d.check()?;
        }
        if delta.is_empty() {
            return Ok(self.next_seq());
        }
        let entries = Arc::make_mut(&mut self.entries);
        for d in delta {
            let seq = entries.len() as u64;
            entries.push(MemoryEntry { seq, author: d.author, kind: d.kind, payload: d.payload, step });
        }
        Ok(self.next_seq())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::answer::MetricKind;
    use proptest::prelude::*;

    fn task() -> TaskSpec {
        TaskSpec {
            title: "t".into(),
            description: "d".into(),
            query: "q".into(),
            image_ref: "img://1".into(),
            metric_kind: MetricKind::VqaAccuracy,
        }
    }

    fn fb(i: usize) -> MemoryDraft {
        MemoryDraft::feedback(StateId::Oneshot, format!("note {i}"))
    }

    #[test]
    fn empty_snapshot() {
        let m = SharedMemory::new(task());
        assert_eq!(m.snapshot().len(), 0);
    }

    #[test]
    fn old_snapshot_is_unaffected_by_appends() {
        let mut m = SharedMemory::new(task());
        m.append(0, (0..3).map(fb)).unwrap();
        let snap = m.snapshot();
        m.append(1, [fb(3)]).unwrap();
        assert_eq!(snap.len(), 3);
        assert_eq!(m.snapshot().len(), 4);
    }

    #[test]
    fn append_assigns_contiguous_seqs() {
        let mut m = SharedMemory::new(task());
        assert_eq!(m.append(0, Vec::new()).unwrap(), 0);
        m.append(0, (0..5).map(fb)).unwrap();
        assert_eq!(m.append(2, [fb(5), fb(6)]).unwrap(), 7);
        let snap = m.snapshot();
        let tail: Vec<_> = snap.entries()[5..].iter().map(|e| (e.seq, e.step)).collect();
        assert_eq!(tail, vec![(5, 2), (6, 2)]);
    }

    #[test]
    fn rejects_unknown_kind_and_mismatched_payloads() {
        assert_eq!(
            MemoryDraft::parse(Author::System, "telemetry", Payload::Text("x".into())),
            Err(MemoryError::UnknownKind("telemetry".into()))
        );
        let mut m = SharedMemory::new(task());
        let bad = MemoryDraft::new(Author::System, EntryKind::Answer, Payload::Text("3".into()));
        let err = m.append(0, [fb(0), bad]).unwrap_err();
        assert_eq!(err, MemoryError::PayloadMismatch { kind: EntryKind::Answer });
        assert_eq!(m.len(), 0, "rejected delta must not be partially applied");
        let inverted = MemoryDraft::answer(
            StateId::Specialized,
            AnswerValue::Box(crate::model::BoxCoords::from([50.0, 50.0, 10.0, 10.0])),
        );
        assert!(m.append(0, [inverted]).is_err());
    }

    #[test]
    fn extract_answer_takes_the_last_answer() {
        let mut m = SharedMemory::new(task());
        assert_eq!(extract_answer(&m.snapshot()).unwrap(), None);
        m.append(0, [MemoryDraft::answer(StateId::Oneshot, AnswerValue::text("chair"))]).unwrap();
        assert_eq!(extract_answer(&m.snapshot()).unwrap(), Some(AnswerValue::text("chair")));
        m.append(1, [MemoryDraft::answer(StateId::Oneshot, AnswerValue::text("4")), fb(1)]).unwrap();
        m.append(2, [MemoryDraft::answer(StateId::Stepwise, AnswerValue::text("3"))]).unwrap();
        assert_eq!(extract_answer(&m.snapshot()).unwrap(), Some(AnswerValue::text("3")));
    }

    #[test]
    fn malformed_answer_names_its_seq() {
        let json = r#"{"task":{"title":"t","description":"d","query":"q","image_ref":"i","metric_kind":"grounding_iou"},
            "entries":[{"seq":0,"author":"system","kind":"query","payload":"q","step":0},
                       {"seq":1,"author":"Specialized","kind":"answer","payload":{"box":[50,50,10,10]},"step":0}]}"#;
        let snap: Snapshot = serde_json::from_str(json).unwrap();
        match extract_answer(&snap) {
            Err(MemoryError::MalformedAnswer { seq, .. }) => assert_eq!(seq, 1),
            other => panic!("expected malformed answer, got {other:?}"),
        }
    }

    #[test]
    fn entry_wire_fields() {
        let mut m = SharedMemory::new(task());
        m.append(4, [MemoryDraft::variable(StateId::Stepwise, "x", "1")]).unwrap();
        let v = serde_json::to_value(&m.snapshot().entries()[0]).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"seq":0,"author":"StepWiseReasoning","kind":"variable",
                "payload":{"name":"x","value":"1"},"step":4})
        );
    }

    #[test]
    fn variables_keep_first_definition_order() {
        let mut m = SharedMemory::new(task());
        m.append(
            0,
            [
                MemoryDraft::variable(StateId::Stepwise, "a", "1"),
                MemoryDraft::variable(StateId::Stepwise, "b", "2"),
                MemoryDraft::variable(StateId::Stepwise, "a", "3"),
            ],
        )
        .unwrap();
        assert_eq!(m.snapshot().variables(), vec![("a", "3"), ("b", "2")]);
    }

    fn arb_draft() -> impl Strategy<Value = MemoryDraft> {
        prop_oneof![
            "[a-z ]{0,12}".prop_map(|t| MemoryDraft::feedback(StateId::Oneshot, t)),
            "[a-z=\"0-9 ]{0,12}".prop_map(|t| MemoryDraft::code(StateId::Stepwise, t)),
            ("[a-z]{1,4}", "[0-9]{1,3}").prop_map(|(n, v)| MemoryDraft::variable(StateId::Stepwise, n, v)),
            "[a-z]{1,8}".prop_map(|t| MemoryDraft::answer(StateId::Specialized, AnswerValue::text(t))),
            prop::sample::select(StateId::ALL.to_vec()).prop_map(MemoryDraft::transition),
        ]
    }

    proptest! {
        #[test]
        fn serialized_memory_only_grows_by_suffix(batches in prop::collection::vec(prop::collection::vec(arb_draft(), 0..5), 0..8)) {
            let mut m = SharedMemory::new(task());
            let mut replay: Vec<MemoryDraft> = Vec::new();
            for (step, batch) in batches.into_iter().enumerate() {
                let before = m.snapshot();
                let before_json = serde_json::to_string(before.entries()).unwrap();
                replay.extend(batch.iter().cloned());
                m.append(step as u32, batch).unwrap();
                let after = m.snapshot();
                prop_assert_eq!(&after.entries()[..before.len()], before.entries());
                let after_json = serde_json::to_string(after.entries()).unwrap();
                prop_assert!(after_json.starts_with(&before_json[..before_json.len() - 1]));
                prop_assert_eq!(serde_json::to_string(before.entries()).unwrap(), before_json);
            }
            // total order equals append-call order
            let snap = m.snapshot();
            prop_assert_eq!(snap.len(), replay.len());
            for (i, (e, d)) in snap.entries().iter().zip(&replay).enumerate() {
                prop_assert_eq!(e.seq, i as u64);
                prop_assert_eq!(&e.payload, &d.payload);
            }
            prop_assert_eq!(serde_json::to_string(&m.snapshot()).unwrap(), serde_json::to_string(&m.snapshot()).unwrap());
            prop_assert_eq!(m.snapshot(), m.snapshot());
        }
    }
}
