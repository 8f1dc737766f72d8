//! Vocabulary shared by the whole engine: states, memory, answers and traces.

mod answer;
mod memory;
mod state;
mod trace;

pub use answer::{AnswerValue, BoxCoords, BoxError, MetricKind, TaskSpec};
pub use memory::{extract_answer, Author, EntryKind, MemoryDraft, MemoryEntry, MemoryError, Payload, SharedMemory, Snapshot};
pub use state::{StateId, UnknownState};
pub use trace::{EpisodeTrace, Outcome, SeqRange, TraceStep};
