//! States of the hyper automaton and their wire names.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A top-level state. The set is closed: agent states do task work, lifecycle
/// states coordinate the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateId {
    #[serde(rename = "Initial")]
    Initial,
    #[serde(rename = "OneShotReasoning")]
    Oneshot,
    #[serde(rename = "StepWiseReasoning")]
    Stepwise,
    #[serde(rename = "Specialized")]
    Specialized,
    #[serde(rename = "Final")]
    Final,
    #[serde(rename = "Failure")]
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown state name {0:?}")]
pub struct UnknownState(pub String);

impl StateId {
    pub const ALL: [StateId; 6] = [
        StateId::Initial,
        StateId::Oneshot,
        StateId::Stepwise,
        StateId::Specialized,
        StateId::Final,
        StateId::Failure,
    ];

    /// Agent states in canonical candidate order.
    pub const AGENTS: [StateId; 3] = [StateId::Specialized, StateId::Oneshot, StateId::Stepwise];

    pub const LIFECYCLE: [StateId; 3] = [StateId::Initial, StateId::Final, StateId::Failure];

    pub fn is_agent(self) -> bool {
        matches!(self, StateId::Oneshot | StateId::Stepwise | StateId::Specialized)
    }

    pub fn is_lifecycle(self) -> bool {
        matches!(self, StateId::Initial | StateId::Final | StateId::Failure)
    }

    /// The name used in controller prompts and dataset files.
    pub fn wire_name(self) -> &'static str {
        match self {
            StateId::Initial => "Initial",
            StateId::Oneshot => "OneShotReasoning",
            StateId::Stepwise => "StepWiseReasoning",
            StateId::Specialized => "Specialized",
            StateId::Final => "Final",
            StateId::Failure => "Failure",
        }
    }

    /// Inverse of [`StateId::wire_name`]. Exact match only.
    pub fn from_wire(name: &str) -> Result<StateId, UnknownState> {
        StateId::ALL
            .into_iter()
            .find(|s| s.wire_name() == name)
            .ok_or_else(|| UnknownState(name.to_string()))
    }

    /// Position in the canonical candidate order (Final first, then agents).
    pub fn canonical_rank(self) -> usize {
        match self {
            StateId::Final => 0,
            StateId::Specialized => 1,
            StateId::Oneshot => 2,
            StateId::Stepwise => 3,
            StateId::Initial => 4,
            StateId::Failure => 5,
        }
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl FromStr for StateId {
    type Err = UnknownState;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StateId::from_wire(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partition_is_exact() {
        for s in StateId::ALL {
            assert!(s.is_agent() ^ s.is_lifecycle(), "{s}");
        }
        let agents: Vec<_> = StateId::ALL.into_iter().filter(|s| s.is_agent()).collect();
        assert_eq!(agents.len(), 3);
        assert!(StateId::LIFECYCLE.iter().all(|s| s.is_lifecycle()));
    }

    #[test]
    fn wire_names_match_dataset_spelling() {
        assert_eq!(StateId::Oneshot.wire_name(), "OneShotReasoning");
        assert_eq!(StateId::Stepwise.wire_name(), "StepWiseReasoning");
        assert_eq!(StateId::Specialized.wire_name(), "Specialized");
        for s in StateId::ALL {
            assert_eq!(StateId::from_wire(s.wire_name()).unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.wire_name()));
        }
    }

    #[test]
    fn near_misses_are_rejected() {
        for bad in ["Stepwise", "Oneshot", "final", "OneShot", " Final", ""] {
            assert!(StateId::from_wire(bad).is_err(), "{bad:?}");
        }
    }

    proptest! {
        #[test]
        fn parse_rejects_everything_outside_the_set(name in "\\PC{0,24}") {
            let known = StateId::ALL.iter().any(|s| s.wire_name() == name);
            prop_assert_eq!(StateId::from_wire(&name).is_ok(), known);
        }
    }
}
