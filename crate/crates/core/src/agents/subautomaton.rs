//! Micro state machines driven inside one agent cycle.
//!
//! A [`SubAutomatonSpec`] is plain data (the built-in graphs ship as JSON
//! under `specs/`). [`MicroRun`] walks a spec by firing named events. Every
//! budgeted micro-state may be entered at most `1 + budget` times per run;
//! the next entry is redirected to `Failure`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INITIAL: &str = "Initial";
pub const RETURN: &str = "Return";
pub const FAILURE: &str = "Failure";

const ONESHOT_SPEC: &str = include_str!("../../specs/oneshot.json");
const STEPWISE_SPEC: &str = include_str!("../../specs/stepwise.json");
const SPECIALIZED_SPEC: &str = include_str!("../../specs/specialized.json");
const HYPER_AGENT_SPEC: &str = include_str!("../../specs/hyper_agent.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub event: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubAutomatonSpec {
    pub name: String,
    pub micro_states: Vec<String>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub retry_budget: BTreeMap<String, u32>,
}

impl SubAutomatonSpec {
    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(raw)
    }

    fn shipped(raw: &str) -> Self {
        Self::from_json(raw).expect("shipped sub-automaton spec parses")
    }

    pub fn oneshot() -> Self {
        Self::shipped(ONESHOT_SPEC)
    }

    pub fn stepwise() -> Self {
        Self::shipped(STEPWISE_SPEC)
    }

    pub fn specialized() -> Self {
        Self::shipped(SPECIALIZED_SPEC)
    }

    pub fn hyper_agent() -> Self {
        Self::shipped(HYPER_AGENT_SPEC)
    }

    pub fn builtin() -> Vec<Self> {
        vec![Self::hyper_agent(), Self::oneshot(), Self::stepwise(), Self::specialized()]
    }

    /// Same graph with every budgeted micro-state set to `budget`.
    pub fn with_uniform_budget(mut self, budget: u32) -> Self {
        for b in self.retry_budget.values_mut() {
            *b = budget;
        }
        self
    }

    pub fn budget(&self, state: &str) -> Option<u32> {
        self.retry_budget.get(state).copied()
    }

    /// Sum of all retry budgets; bounds the extra backend calls of one run.
    pub fn total_budget(&self) -> u32 {
        self.retry_budget.values().sum()
    }

    fn is_terminal(state: &str) -> bool {
        state == RETURN || state == FAILURE
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Defect {
    InitialCount(usize),
    ReturnCount(usize),
    UndeclaredState { edge: usize, state: String },
    UndeclaredBudget(String),
    NonTerminating(String),
    UnboundedLoop(Vec<String>),
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::InitialCount(n) => write!(f, "expected exactly one {INITIAL} micro-state, found {n}"),
            Defect::ReturnCount(n) => write!(f, "expected exactly one {RETURN} micro-state, found {n}"),
            Defect::UndeclaredState { edge, state } => write!(f, "edge {edge} references undeclared micro-state {state}"),
            Defect::UndeclaredBudget(s) => write!(f, "retry budget set for undeclared micro-state {s}"),
            Defect::NonTerminating(s) => write!(f, "micro-state {s} cannot reach {RETURN} or {FAILURE}"),
            Defect::UnboundedLoop(states) => write!(f, "unbounded retry loop through {}", states.join(", ")),
        }
    }
}

/// Static checks; an empty result means the spec is safe to run.
pub fn validate_subautomaton(spec: &SubAutomatonSpec) -> Vec<Defect> {
    let mut defects = Vec::new();
    let declared: BTreeSet<&str> = spec.micro_states.iter().map(String::as_str).collect();
    let count = |name: &str| spec.micro_states.iter().filter(|s| *s == name).count();
    if count(INITIAL) != 1 {
        defects.push(Defect::InitialCount(count(INITIAL)));
    }
    if count(RETURN) != 1 {
        defects.push(Defect::ReturnCount(count(RETURN)));
    }
    for (i, e) in spec.edges.iter().enumerate() {
        for s in [&e.from, &e.to] {
            if !declared.contains(s.as_str()) && s != FAILURE {
                defects.push(Defect::UndeclaredState { edge: i, state: s.clone() });
            }
        }
    }
    for s in spec.retry_budget.keys() {
        if !declared.contains(s.as_str()) {
            defects.push(Defect::UndeclaredBudget(s.clone()));
        }
    }

    let mut succ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in &spec.edges {
        succ.entry(e.from.as_str()).or_default().insert(e.to.as_str());
    }

    // Backward reachability from the terminals. Budget exhaustion is an
    // implicit edge to Failure, so budgeted states always terminate.
    let mut done: BTreeSet<&str> = declared
        .iter()
        .copied()
        .filter(|s| SubAutomatonSpec::is_terminal(s) || spec.retry_budget.contains_key(*s))
        .collect();
    loop {
        let before = done.len();
        for s in &declared {
            if !done.contains(s) && succ.get(s).is_some_and(|n| n.iter().any(|t| done.contains(t) || *t == FAILURE)) {
                done.insert(s);
            }
        }
        if done.len() == before {
            break;
        }
    }
    for s in &spec.micro_states {
        if !done.contains(s.as_str()) {
            defects.push(Defect::NonTerminating(s.clone()));
        }
    }

    // A cycle is bounded iff it passes through a budgeted state, so any cycle
    // in the unbudgeted subgraph is a defect.
    let free: BTreeSet<&str> = declared.iter().copied().filter(|s| !spec.retry_budget.contains_key(*s)).collect();
    if let Some(cycle) = find_cycle(&free, &succ) {
        defects.push(Defect::UnboundedLoop(cycle));
    }
    defects
}

fn find_cycle<'a>(nodes: &BTreeSet<&'a str>, succ: &BTreeMap<&'a str, BTreeSet<&'a str>>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Closed,
    }
    fn visit<'a>(
        n: &'a str,
        nodes: &BTreeSet<&'a str>,
        succ: &BTreeMap<&'a str, BTreeSet<&'a str>>,
        marks: &mut HashMap<&'a str, Mark>,
        path: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(n, Mark::Open);
        path.push(n);
        for &m in succ.get(n).into_iter().flatten() {
            if !nodes.contains(m) {
                continue;
            }
            match marks.get(m) {
                Some(Mark::Open) => {
                    let start = path.iter().position(|p| *p == m).expect("open node is on the path");
                    return Some(path[start..].iter().map(|s| s.to_string()).collect());
                }
                Some(Mark::Closed) => {}
                None => {
                    if let Some(c) = visit(m, nodes, succ, marks, path) {
                        return Some(c);
                    }
                }
            }
        }
        path.pop();
        marks.insert(n, Mark::Closed);
        None
    }
    let mut marks = HashMap::new();
    for &n in nodes {
        if !marks.contains_key(n) {
            if let Some(c) = visit(n, nodes, succ, &mut marks, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MicroError {
    #[error("sub-automaton {spec}: no edge from {from} on event {event}")]
    NoEdge { spec: String, from: String, event: String },
    #[error("sub-automaton {spec} already finished in {state}")]
    Finished { spec: String, state: String },
}

/// One walk through a spec.
#[derive(Debug, Clone)]
pub struct MicroRun<'a> {
    spec: &'a SubAutomatonSpec,
    current: String,
    entries: HashMap<String, u32>,
    trail: Vec<String>,
    exhausted: Option<String>,
}

impl<'a> MicroRun<'a> {
    /// Starts at `Initial` and fires `enter`.
    pub fn start(spec: &'a SubAutomatonSpec) -> Result<Self, MicroError> {
        let mut run = MicroRun {
            spec,
            current: INITIAL.to_string(),
            entries: HashMap::new(),
            trail: vec![INITIAL.to_string()],
            exhausted: None,
        };
        run.fire("enter")?;
        Ok(run)
    }

    pub fn current(&self) -> &str {
        &self.current
    }

    pub fn is_finished(&self) -> bool {
        SubAutomatonSpec::is_terminal(&self.current)
    }

    /// Micro-states visited so far, in order.
    pub fn trail(&self) -> &[String] {
        &self.trail
    }

    /// Times `state` has been entered.
    pub fn entries(&self, state: &str) -> u32 {
        self.entries.get(state).copied().unwrap_or(0)
    }

    /// The budgeted micro-state whose budget ran out, if that ended the run.
    pub fn exhausted(&self) -> Option<&str> {
        self.exhausted.as_deref()
    }

    pub fn fire(&mut self, event: &str) -> Result<&str, MicroError> {
        if self.is_finished() {
            return Err(MicroError::Finished { spec: self.spec.name.clone(), state: self.current.clone() });
        }
        let edge = self
            .spec
            .edges
            .iter()
            .find(|e| e.from == self.current && e.event == event)
            .ok_or_else(|| MicroError::NoEdge {
                spec: self.spec.name.clone(),
                from: self.current.clone(),
                event: event.to_string(),
            })?;
        let mut to = edge.to.clone();
        if let Some(budget) = self.spec.budget(&to) {
            let n = self.entries.entry(to.clone()).or_insert(0);
            *n += 1;
            if *n > 1 + budget {
                self.exhausted = Some(to);
                to = FAILURE.to_string();
            }
        } else {
            *self.entries.entry(to.clone()).or_insert(0) += 1;
        }
        self.trail.push(to.clone());
        self.current = to;
        Ok(&self.current)
    }
}
