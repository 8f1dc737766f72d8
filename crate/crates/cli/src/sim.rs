//! Policy comparison over synthetic agents.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use hyperstate_core::agents::AgentRegistry;
use hyperstate_core::automaton::{run_episode, AutomatonConfig, EngineError};
use hyperstate_core::gateway::{CompletionRequest, FnTransport, Gateway, GatewayPolicy, Role};
use hyperstate_core::metrics::{self, MetricError};
use hyperstate_core::model::{extract_answer, EpisodeTrace, StateId};
use hyperstate_core::policy::{DecisionContext, LlmPolicy, PolicyDecision, PolicyError, RandomPolicy, TransitionPolicy};
use hyperstate_core::prompter::{candidates_in_prompt, render_reply};
use hyperstate_core::seed;
use hyperstate_core::trajectory::{best_child, label_task, ExpandOptions, LabeledTask, TreeError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{category_in, synthetic_registry, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimPolicy {
    Random,
    Oracle,
    LlmMock,
    Exhaustive,
}

impl SimPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SimPolicy::Random => "random",
            SimPolicy::Oracle => "oracle",
            SimPolicy::LlmMock => "llm-mock",
            SimPolicy::Exhaustive => "exhaustive",
        }
    }
}

impl FromStr for SimPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [SimPolicy::Random, SimPolicy::Oracle, SimPolicy::LlmMock, SimPolicy::Exhaustive]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy {s:?} (expected random, oracle, llm-mock or exhaustive)"))
    }
}

/// The choice a perfectly informed controller makes: stop once an answer
/// exists, otherwise the best unmasked agent for the category.
pub fn oracle_choice(ranking: &[StateId], candidates: &[StateId], answered: bool) -> StateId {
    if answered && candidates.contains(&StateId::Final) {
        return StateId::Final;
    }
    ranking
        .iter()
        .copied()
        .find(|s| candidates.contains(s))
        .or_else(|| candidates.iter().copied().find(|s| s.is_agent()))
        .unwrap_or(candidates[0])
}

/// Consults the hidden category ranking of one task.
pub struct OraclePolicy {
    ranking: Vec<StateId>,
}

impl OraclePolicy {
    pub fn new(ranking: Vec<StateId>) -> Self {
        OraclePolicy { ranking }
    }
}

impl TransitionPolicy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError> {
        if ctx.candidates.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        let answered = matches!(extract_answer(ctx.memory), Ok(Some(_)));
        let chosen = oracle_choice(&self.ranking, ctx.candidates, answered);
        Ok(PolicyDecision { chosen, rationale: "category ranking".into(), attempts: 1, fallback: false })
    }
}

pub const MOCK_MODEL_ID: &str = "mock-controller";

/// A scripted stand-in for a pretrained controller model. It reads the
/// category marker and the `final_answer` variable from the prompt, follows
/// the ranking with probability `accuracy`, and otherwise picks uniformly.
/// `malformed_rate` of replies carry no tag.
pub fn mock_controller(scenario: &Scenario) -> Arc<Gateway> {
    let rankings: HashMap<String, Vec<StateId>> =
        scenario.categories.iter().map(|c| (c.name.clone(), c.ranking.clone())).collect();
    let profile = scenario.llm_mock;
    let transport = FnTransport(move |req: &CompletionRequest| {
        let prompt = req.messages.iter().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str());
        let candidates = candidates_in_prompt(prompt);
        let r = seed::derive(req.seed.unwrap_or(0), &[req.messages.len() as u64]);
        if candidates.is_empty() || seed::unit(seed::derive(r, &[0])) < profile.malformed_rate {
            return Ok("I would continue with the next reasoning step.".to_string());
        }
        let ranking = category_in(prompt).and_then(|c| rankings.get(c)).map_or(&[][..], Vec::as_slice);
        let answered = prompt.contains("\nfinal_answer: ");
        let chosen = if seed::unit(seed::derive(r, &[1])) < profile.accuracy {
            oracle_choice(ranking, &candidates, answered)
        } else {
            candidates[(seed::derive(r, &[2]) % candidates.len() as u64) as usize]
        };
        Ok(render_reply(chosen))
    });
    Arc::new(Gateway::new(
        Arc::new(transport),
        GatewayPolicy { timeout: Duration::from_secs(1), retries: 0, backoff: Duration::ZERO },
    ))
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("task {task}: {source}")]
    Engine { task: String, source: EngineError },
    #[error("task {task}: {source}")]
    Tree { task: String, source: TreeError },
    #[error("task {task}: {source}")]
    Metric { task: String, source: MetricError },
    #[error("task {0} has no category known to the scenario")]
    UnknownCategory(String),
    #[error("episodes must be at least 1")]
    NoEpisodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub score: f64,
    pub steps: u32,
    pub cost: f64,
    pub fallbacks: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    pub episodes: usize,
    pub mean_score: f64,
    pub mean_steps: f64,
    pub mean_cost: f64,
    pub fallback_decisions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: String,
    pub seed: u64,
    pub episodes: usize,
    pub rows: Vec<PolicyRow>,
}

impl BenchmarkReport {
    pub fn row(&self, policy: SimPolicy) -> Option<&PolicyRow> {
        self.rows.iter().find(|r| r.policy == policy.name())
    }

    /// Aligned table, two decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}  seed {}  episodes {}", self.scenario, self.seed, self.episodes);
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>10} {:>10} {:>10} {:>10}",
            "policy", "episodes", "score", "steps", "cost", "fallbacks"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>10.2} {:>10.2} {:>10.2} {:>10}",
                r.policy, r.episodes, r.mean_score, r.mean_steps, r.mean_cost, r.fallback_decisions
            );
        }
        out
    }
}

fn trace_record(scenario: &Scenario, task: &LabeledTask, trace: &EpisodeTrace) -> Result<EpisodeRecord, SimError> {
    let score = match trace.outcome.answer() {
        Some(a) => metrics::score(task.task.metric_kind, a, &task.gold)
            .map_err(|source| SimError::Metric { task: task.id.clone(), source })?,
        None => 0.0,
    };
    Ok(EpisodeRecord {
        score,
        steps: trace.steps.len() as u32,
        cost: trace.steps.iter().map(|s| scenario.cost(s.state)).sum(),
        fallbacks: trace.steps.iter().filter(|s| s.rationale.starts_with("fallback to random")).count() as u32,
    })
}

/// Runs one task under `policy`.
pub fn run_one(
    scenario: &Scenario,
    policy: SimPolicy,
    task: &LabeledTask,
    agents: &AgentRegistry,
    controller: &Arc<Gateway>,
    config: &AutomatonConfig,
    episode_seed: u64,
) -> Result<EpisodeRecord, SimError> {
    let engine = |source| SimError::Engine { task: task.id.clone(), source };
    match policy {
        SimPolicy::Random => {
            let trace = run_episode(&task.task, agents, &RandomPolicy, config, episode_seed).map_err(engine)?;
            trace_record(scenario, task, &trace)
        }
        SimPolicy::Oracle => {
            let ranking = task
                .category
                .as_deref()
                .and_then(|c| scenario.category(c))
                .ok_or_else(|| SimError::UnknownCategory(task.id.clone()))?
                .ranking
                .clone();
            let trace =
                run_episode(&task.task, agents, &OraclePolicy::new(ranking), config, episode_seed).map_err(engine)?;
            trace_record(scenario, task, &trace)
        }
        SimPolicy::LlmMock => {
            let llm = LlmPolicy::new(controller.clone(), MOCK_MODEL_ID).with_prompt_config(config.prompt);
            let trace = run_episode(&task.task, agents, &llm, config, episode_seed).map_err(engine)?;
            trace_record(scenario, task, &trace)
        }
        SimPolicy::Exhaustive => {
            let options = ExpandOptions {
                depth_limit: scenario.exhaustive_depth,
                verify_replay: false,
                parallel: false,
                ..ExpandOptions::default()
            };
            let (tree, _) = label_task(task, agents, config, options, episode_seed)
                .map_err(|source| SimError::Tree { task: task.id.clone(), source })?;
            // Every cycle in the tree is paid for; the answer is the best leaf.
            let cost = tree.nodes.iter().skip(1).map(|n| scenario.cost(n.state)).sum();
            let mut at = 0;
            let mut steps = 0;
            while let Some(next) = best_child(&tree, at) {
                at = next;
                steps += 1;
            }
            Ok(EpisodeRecord { score: tree.root().value.unwrap_or(0.0), steps, cost, fallbacks: 0 })
        }
    }
}

/// Runs `episodes` sampled tasks under every policy. Task `i` and its
/// episode seed are shared across policies.
pub fn simulate(
    scenario: &Scenario,
    policies: &[SimPolicy],
    episodes: usize,
    seed: u64,
    config: &AutomatonConfig,
) -> Result<BenchmarkReport, SimError> {
    if episodes == 0 {
        return Err(SimError::NoEpisodes);
    }
    let tasks = scenario.sample_tasks(episodes, seed);
    let agents = synthetic_registry(scenario, &tasks);
    let controller = mock_controller(scenario);
    let mut rows = Vec::new();
    for &policy in policies {
        let records: Vec<EpisodeRecord> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let ep_seed = seed::derive(seed::derive_str(seed, "episode"), &[i as u64]);
                run_one(scenario, policy, t, &agents, &controller, config, ep_seed)
            })
            .collect::<Result<_, _>>()?;
        let n = records.len() as f64;
        rows.push(PolicyRow {
            policy: policy.name().into(),
            episodes: records.len(),
            mean_score: records.iter().map(|r| r.score).sum::<f64>() / n,
            mean_steps: records.iter().map(|r| r.steps as f64).sum::<f64>() / n,
            mean_cost: records.iter().map(|r| r.cost).sum::<f64>() / n,
            fallback_decisions: records.iter().map(|r| r.fallbacks).sum(),
        });
    }
    Ok(BenchmarkReport { scenario: scenario.name.clone(), seed, episodes, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for p in [SimPolicy::Random, SimPolicy::Oracle, SimPolicy::LlmMock, SimPolicy::Exhaustive] {
            assert_eq!(p.name().parse::<SimPolicy>().unwrap(), p);
        }
        assert!("greedy".parse::<SimPolicy>().is_err());
    }

    #[test]
    fn oracle_choice_rules() {
        use StateId::*;
        let all = [Final, Specialized, Oneshot, Stepwise];
        assert_eq!(oracle_choice(&[Stepwise, Oneshot], &all, false), Stepwise);
        assert_eq!(oracle_choice(&[Stepwise, Oneshot], &all, true), Final);
        assert_eq!(oracle_choice(&[Stepwise, Oneshot], &[Final, Specialized, Oneshot], false), Oneshot);
        assert_eq!(oracle_choice(&[], &[Specialized, Oneshot], true), Specialized);
    }

    #[test]
    fn table_has_two_decimals() {
        let r = BenchmarkReport {
            scenario: "s".into(),
            seed: 1,
            episodes: 2,
            rows: vec![PolicyRow {
                policy: "random".into(),
                episodes: 2,
                mean_score: 0.5,
                mean_steps: 3.0,
                mean_cost: 1.25,
                fallback_decisions: 0,
            }],
        };
        let t = r.to_table();
        assert!(t.contains("0.50") && t.contains("3.00") && t.contains("1.25"), "{t}");
    }
}
