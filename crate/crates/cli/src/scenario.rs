//! Synthetic benchmark scenarios: query categories, per-agent profiles and a
//! hidden category -> agent ranking the oracle policy consults.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use hyperstate_core::agents::{Agent, AgentCycleResult, AgentRegistry, CycleContext};
use hyperstate_core::model::{AnswerValue, BoxCoords, MemoryDraft, MetricKind, StateId, TaskSpec};
use hyperstate_core::seed;
use hyperstate_core::trajectory::LabeledTask;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    /// Relative frequency in the task mix.
    pub weight: f64,
    pub metric_kind: MetricKind,
    /// Agents from best to worst for this category.
    pub ranking: Vec<StateId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerQuality {
    /// IoU range of a correct grounding answer.
    pub correct_iou: [f64; 2],
    /// IoU range of a wrong one.
    pub wrong_iou: [f64; 2],
}

impl Default for AnswerQuality {
    fn default() -> Self {
        AnswerQuality { correct_iou: [0.75, 1.0], wrong_iou: [0.0, 0.3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentProfile {
    /// Category name -> probability that a cycle produces a correct answer.
    pub success_prob: BTreeMap<String, f64>,
    /// Probability that a cycle fails unrecoverably.
    #[serde(default)]
    pub failure_prob: f64,
    /// Abstract latency units per cycle.
    pub cost: f64,
    #[serde(default)]
    pub answer_quality: AnswerQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmMockProfile {
    /// Probability a well-formed reply follows the category ranking.
    pub accuracy: f64,
    /// Probability a reply has no usable tag.
    pub malformed_rate: f64,
}

impl Default for LlmMockProfile {
    fn default() -> Self {
        LlmMockProfile { accuracy: 0.7, malformed_rate: 0.1 }
    }
}

fn default_depth() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub categories: Vec<Category>,
    pub agents: BTreeMap<StateId, AgentProfile>,
    #[serde(default)]
    pub llm_mock: LlmMockProfile,
    /// Depth limit used by the exhaustive-branching policy.
    #[serde(default = "default_depth")]
    pub exhaustive_depth: u32,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn unit_interval(what: &str, p: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ScenarioError::Invalid(format!("{what} = {p} is outside [0, 1]")))
    }
}

fn range(what: &str, r: [f64; 2]) -> Result<(), ScenarioError> {
    unit_interval(what, r[0])?;
    unit_interval(what, r[1])?;
    if r[0] > r[1] {
        return Err(ScenarioError::Invalid(format!("{what} range {r:?} is inverted")));
    }
    Ok(())
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Scenario::parse(&std::fs::read_to_string(path)?)
    }

    pub fn default_scenario() -> Self {
        Scenario::parse(DEFAULT_SCENARIO).expect("shipped scenario is valid")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        let mut seen = BTreeMap::new();
        for c in &self.categories {
            if seen.insert(c.name.as_str(), ()).is_some() {
                return bad(format!("duplicate category {:?}", c.name));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return bad(format!("category {:?} needs a positive weight", c.name));
            }
            if c.ranking.is_empty() || c.ranking.iter().any(|s| !s.is_agent()) {
                return bad(format!("category {:?} ranking must list agent states only", c.name));
            }
        }
        for s in StateId::AGENTS {
            let Some(p) = self.agents.get(&s) else {
                return bad(format!("no profile for {s}"));
            };
            unit_interval(&format!("{s}.failure_prob"), p.failure_prob)?;
            if !(p.cost.is_finite() && p.cost >= 0.0) {
                return bad(format!("{s}.cost must be non-negative"));
            }
            range(&format!("{s}.answer_quality.correct_iou"), p.answer_quality.correct_iou)?;
            range(&format!("{s}.answer_quality.wrong_iou"), p.answer_quality.wrong_iou)?;
            for c in &self.categories {
                match p.success_prob.get(&c.name) {
                    Some(v) => unit_interval(&format!("{s}.success_prob.{}", c.name), *v)?,
                    None => return bad(format!("{s} has no success_prob for category {:?}", c.name)),
                }
            }
            if let Some(extra) = p.success_prob.keys().find(|k| !seen.contains_key(k.as_str())) {
                return bad(format!("{s}.success_prob names unknown category {extra:?}"));
            }
        }
        if let Some(s) = self.agents.keys().find(|s| !s.is_agent()) {
            return bad(format!("profile given for non-agent state {s}"));
        }
        unit_interval("llm_mock.accuracy", self.llm_mock.accuracy)?;
        unit_interval("llm_mock.malformed_rate", self.llm_mock.malformed_rate)?;
        Ok(())
    }

    pub fn category(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn cost(&self, state: StateId) -> f64 {
        self.agents.get(&state).map_or(0.0, |p| p.cost)
    }

    fn pick_category(&self, u: f64) -> &Category {
        let total: f64 = self.categories.iter().map(|c| c.weight).sum();
        let mut acc = 0.0;
        for c in &self.categories {
            acc += c.weight / total;
            if u < acc {
                return c;
            }
        }
        self.categories.last().expect("validated non-empty")
    }

    /// `n` tasks drawn from the category mix. Task `i` depends only on
    /// `(seed, i)`.
    pub fn sample_tasks(&self, n: usize, seed: u64) -> Vec<LabeledTask> {
        (0..n)
            .map(|i| {
                let s = seed::derive(seed::derive_str(seed, "task"), &[i as u64]);
                let c = self.pick_category(seed::unit(seed::derive(s, &[0])));
                let id = format!("sim-{i:05}");
                let gold = match c.metric_kind {
                    MetricKind::VqaAccuracy => AnswerValue::text(format!("answer {i}")),
                    MetricKind::GroundingIou => {
                        let at = |k: u64, lo: f64, span: f64| (lo + seed::unit(seed::derive(s, &[k])) * span).round();
                        let (x, y, w, h) = (at(1, 0.0, 300.0), at(2, 0.0, 200.0), at(3, 40.0, 160.0), at(4, 40.0, 160.0));
                        AnswerValue::Box(BoxCoords::new(x, y, x + w, y + h).expect("sampled box is valid"))
                    }
                };
                LabeledTask { task: task_spec(c, &id, i), id, gold, category: Some(c.name.clone()) }
            })
            .collect()
    }
}

/// Marker the mock controller reads the category from.
pub fn category_tag(name: &str) -> String {
    format!("[category: {name}]")
}

pub fn category_in(text: &str) -> Option<&str> {
    let start = text.find("[category: ")? + "[category: ".len();
    let len = text[start..].find(']')?;
    Some(&text[start..start + len])
}

fn task_spec(c: &Category, id: &str, i: usize) -> TaskSpec {
    let (title, description) = match c.metric_kind {
        MetricKind::VqaAccuracy => (
            "Compositional image question answering",
            "This type of question is intended to return a textual answer to the given question.",
        ),
        MetricKind::GroundingIou => (
            "Referring Expression Comprehension",
            "This type of task is to return one image patch in the image that corresponds best to the given query.",
        ),
    };
    TaskSpec {
        title: title.into(),
        description: description.into(),
        query: format!("{} query {i}", category_tag(&c.name)),
        image_ref: format!("sim/{id}.jpg"),
        metric_kind: c.metric_kind,
    }
}

/// Hidden ground truth, keyed by image reference.
#[derive(Debug, Default)]
pub struct World {
    tasks: HashMap<String, (String, AnswerValue)>,
}

impl World {
    pub fn new(tasks: &[LabeledTask]) -> Self {
        let tasks = tasks
            .iter()
            .filter_map(|t| Some((t.task.image_ref.clone(), (t.category.clone()?, t.gold.clone()))))
            .collect();
        World { tasks }
    }
}

/// A box of the same size as `gold`, shifted right so IoU equals `q`.
pub fn box_with_iou(gold: &BoxCoords, q: f64) -> BoxCoords {
    if q <= 0.0 {
        let d = gold.width() + 1.0;
        return BoxCoords { x1: gold.x1 + d, x2: gold.x2 + d, ..*gold };
    }
    // Same-size boxes offset by d: IoU = (w - d) / (w + d).
    let d = gold.width() * (1.0 - q) / (1.0 + q);
    BoxCoords { x1: gold.x1 + d, x2: gold.x2 + d, ..*gold }
}

/// An agent whose answer quality follows its profile.
pub struct SyntheticAgent {
    state: StateId,
    profile: AgentProfile,
    world: Arc<World>,
}

impl SyntheticAgent {
    pub fn new(state: StateId, profile: AgentProfile, world: Arc<World>) -> Self {
        SyntheticAgent { state, profile, world }
    }
}

impl Agent for SyntheticAgent {
    fn state(&self) -> StateId {
        self.state
    }

    fn run_cycle(&self, ctx: &CycleContext<'_>) -> AgentCycleResult {
        let s = self.state;
        let Some((category, gold)) = self.world.tasks.get(&ctx.memory.task().image_ref) else {
            return AgentCycleResult::unrecoverable(s, vec![], "unknown task image");
        };
        let draw = |k: u64| seed::unit(seed::derive(ctx.seed, &[s.canonical_rank() as u64, k]));
        if draw(0) < self.profile.failure_prob {
            return AgentCycleResult::unrecoverable(s, vec![], "simulated backend failure");
        }
        let correct = draw(1) < self.profile.success_prob.get(category).copied().unwrap_or(0.0);
        let answer = match gold {
            AnswerValue::Text(g) if correct => AnswerValue::Text(g.clone()),
            AnswerValue::Text(_) => AnswerValue::text(format!("{} guess {}", s.wire_name(), (draw(2) * 1e6) as u64)),
            AnswerValue::Box(g) => {
                let [lo, hi] =
                    if correct { self.profile.answer_quality.correct_iou } else { self.profile.answer_quality.wrong_iou };
                AnswerValue::Box(box_with_iou(g, lo + (hi - lo) * draw(2)))
            }
        };
        AgentCycleResult::ok(
            s,
            vec![
                MemoryDraft::variable(s, "final_answer", answer.to_string()),
                MemoryDraft::feedback(s, format!("{} proposed {answer}", s.wire_name())),
                MemoryDraft::answer(s, answer),
            ],
            "proposed an answer",
        )
    }
}

/// The three synthetic agents over `tasks`' hidden answers.
pub fn synthetic_registry(scenario: &Scenario, tasks: &[LabeledTask]) -> AgentRegistry {
    let world = Arc::new(World::new(tasks));
    let mut reg = AgentRegistry::new();
    for s in StateId::AGENTS {
        let profile = scenario.agents[&s].clone();
        reg.insert(Arc::new(SyntheticAgent::new(s, profile, world.clone()))).expect("agent state");
    }
    reg
}
