//! Offline controller accuracy on an emitted dataset.

use std::collections::HashMap;

use hyperstate_core::model::StateId;
use hyperstate_core::policy::{decide_random, LlmPolicy, PolicyError};
use hyperstate_core::prompter::{parse_reply, prompt_from_text, ControllerPrompt};
use hyperstate_core::seed;
use hyperstate_core::trajectory::{best_child, SftExample, TrajectoryTree};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no examples")]
    Empty,
    #[error("example {index}: {source}")]
    Policy { index: usize, source: PolicyError },
}

/// Parses JSON Lines; blank lines are skipped, line numbers are 1-based.
pub fn read_dataset(text: &str) -> Result<Vec<SftExample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: SftExample = serde_json::from_str(line)
            .map_err(|e| EvalError::Malformed { line: i + 1, message: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}

/// Engine step of a rendered prompt (its `<CurrentStep>` minus one).
pub fn step_of(text: &str) -> u32 {
    let open = "<CurrentStep>";
    text.rfind(open)
        .and_then(|i| {
            let rest = &text[i + open.len()..];
            rest[..rest.find('<')?].trim().parse::<u32>().ok()
        })
        .map_or(0, |n| n.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub matches: usize,
    pub exact_match: f64,
}

/// Fraction of examples where `decide(index, prompt)` equals the label.
pub fn eval_dataset(
    examples: &[SftExample],
    mut decide: impl FnMut(usize, &ControllerPrompt) -> Result<StateId, PolicyError>,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut matches = 0;
    for (i, ex) in examples.iter().enumerate() {
        let prompt = prompt_from_text(ex.input.clone(), step_of(&ex.input));
        let label = parse_reply(&ex.output, &prompt)
            .map_err(|e| EvalError::Malformed { line: i + 1, message: format!("label: {e}") })?;
        if decide(i, &prompt).map_err(|source| EvalError::Policy { index: i, source })? == label {
            matches += 1;
        }
    }
    Ok(EvalReport { examples: examples.len(), matches, exact_match: matches as f64 / examples.len() as f64 })
}

/// Uniform choice, seeded per example.
pub fn random_decider(seed: u64) -> impl FnMut(usize, &ControllerPrompt) -> Result<StateId, PolicyError> {
    move |i, p| decide_random(&p.candidates, seed::derive(seed, &[i as u64]), p.step).map(|d| d.chosen)
}

pub fn llm_decider(policy: &LlmPolicy, seed: u64) -> impl FnMut(usize, &ControllerPrompt) -> Result<StateId, PolicyError> + '_ {
    move |i, p| policy.decide_prompt(p, seed::derive(seed, &[i as u64])).map(|d| d.chosen)
}

/// Argmax-value choices read off persisted trees, keyed by prompt text.
#[derive(Debug, Default)]
pub struct TreeOracle {
    labels: HashMap<String, StateId>,
}

impl TreeOracle {
    pub fn new<'a>(trees: impl IntoIterator<Item = &'a TrajectoryTree>) -> Self {
        let mut labels = HashMap::new();
        for tree in trees {
            for node in &tree.nodes {
                if let (Some(p), Some(c)) = (&node.prompt, best_child(tree, node.id)) {
                    labels.insert(p.text.clone(), tree.nodes[c].state);
                }
            }
        }
        TreeOracle { labels }
    }

    /// `None` for prompts no tree produced.
    pub fn decide(&self, prompt: &ControllerPrompt) -> Option<StateId> {
        self.labels.get(&prompt.text).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_read_from_the_prompt() {
        assert_eq!(step_of("<State>X</State>\n<CurrentStep>3</CurrentStep>\n"), 2);
        assert_eq!(step_of("no step here"), 0);
    }

    #[test]
    fn malformed_lines_name_their_number() {
        let err = read_dataset("\n{\"input\":1}\n").unwrap_err();
        assert!(matches!(err, EvalError::Malformed { line: 2, .. }), "{err}");
        assert!(matches!(eval_dataset(&[], random_decider(0)), Err(EvalError::Empty)));
        assert_eq!(EvalError::Empty.to_string(), "no examples");
    }
}
