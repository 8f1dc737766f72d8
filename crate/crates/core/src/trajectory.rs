//! Trajectory trees: branch over every candidate from each checkpoint, score
//! the leaves against gold, propagate values upward, and turn the argmax
//! choices into controller training examples.

use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentRegistry;
use crate::automaton::{advance, AutomatonConfig, Checkpoint, EngineError};
use crate::metrics::{self, MetricError};
use crate::model::{extract_answer, AnswerValue, MemoryError, MetricKind, StateId, TaskSpec};
use crate::policy::{enumerate_branches, PolicyDecision};
use crate::prompter::{render_prompt, render_reply, ControllerPrompt};
use crate::seed;

/// A task with its reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTask {
    pub id: String,
    #[serde(flatten)]
    pub task: TaskSpec,
    pub gold: AnswerValue,
    /// Free-form grouping used by the simulator's reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNode {
    pub id: usize,
    pub parent: Option<usize>,
    /// State entered on the edge into this node (`Initial` at the root).
    pub state: StateId,
    /// The entered agent reported an unrecoverable error.
    #[serde(default)]
    pub failed: bool,
    pub depth: u32,
    pub checkpoint: Checkpoint,
    pub children: Vec<usize>,
    /// Answer extracted at a leaf.
    #[serde(default)]
    pub answer: Option<AnswerValue>,
    pub leaf_score: Option<f64>,
    pub value: Option<f64>,
    /// Rendered controller prompt; set on decision nodes only.
    pub prompt: Option<ControllerPrompt>,
}

impl TrajectoryNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTree {
    pub task_id: String,
    pub seed: u64,
    pub depth_limit: u32,
    /// False when replay was not verified (stochastic backends).
    pub replayable: bool,
    #[serde(default)]
    pub gold: Option<AnswerValue>,
    /// Preorder: every parent precedes its children.
    pub nodes: Vec<TrajectoryNode>,
}

impl TrajectoryTree {
    pub fn root(&self) -> &TrajectoryNode {
        &self.nodes[0]
    }

    pub fn metric_kind(&self) -> MetricKind {
        self.root().checkpoint.memory.task().metric_kind
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TrajectoryNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Path of entered states from the root to `id`, root excluded.
    pub fn path(&self, mut id: usize) -> Vec<StateId> {
        let mut out = Vec::new();
        while let Some(p) = self.nodes[id].parent {
            out.push(self.nodes[id].state);
            id = p;
        }
        out.reverse();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("replay of node {node} diverged from its first run")]
    ReplayDivergence { node: usize },
    #[error("tree exceeds {limit} nodes")]
    TooLarge { limit: usize },
    #[error("expanding {path}: {source}")]
    Engine { path: String, source: EngineError },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("scoring node {node}: {source}")]
    Metric { node: usize, source: MetricError },
    #[error("leaf {node} has no score")]
    Unscored { node: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct ExpandOptions {
    pub depth_limit: u32,
    pub max_nodes: usize,
    /// Run every cycle twice and require identical checkpoints.
    pub verify_replay: bool,
    /// Expand sibling branches on the rayon pool.
    pub parallel: bool,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions { depth_limit: 15, max_nodes: 200_000, verify_replay: true, parallel: true }
    }
}

/// Largest node count a tree of depth limit `t` and branching `b` can reach:
/// decision levels `0..=t` plus one forced-`Final` level.
pub fn node_bound(b: u64, t: u32) -> u64 {
    (0..=t as u64 + 1).map(|d| b.saturating_pow(d as u32)).fold(0u64, u64::saturating_add)
}

struct Branch {
    state: StateId,
    failed: bool,
    checkpoint: Checkpoint,
    answer: Option<AnswerValue>,
    prompt: Option<ControllerPrompt>,
    diverged: bool,
    children: Vec<Branch>,
}

struct Expander<'a> {
    agents: &'a AgentRegistry,
    config: &'a AutomatonConfig,
    options: ExpandOptions,
    task_id: &'a str,
    count: AtomicUsize,
}

fn path_label(path: &[StateId]) -> String {
    if path.is_empty() {
        "root".into()
    } else {
        path.iter().map(|s| s.wire_name()).collect::<Vec<_>>().join(" > ")
    }
}

impl Expander<'_> {
    fn claim_node(&self) -> Result<(), TreeError> {
        if self.count.fetch_add(1, Ordering::SeqCst) >= self.options.max_nodes {
            return Err(TreeError::TooLarge { limit: self.options.max_nodes });
        }
        Ok(())
    }

    fn grow(
        &self,
        cp: Checkpoint,
        state: StateId,
        failed: bool,
        terminal: bool,
        path: Vec<StateId>,
        path_seed: u64,
        diverged: bool,
    ) -> Result<Branch, TreeError> {
        let depth = cp.step;
        let mut branch =
            Branch { state, failed, checkpoint: cp, answer: None, prompt: None, diverged, children: Vec::new() };
        let offered = if terminal || branch.checkpoint.is_terminal() {
            Vec::new()
        } else if depth < self.options.depth_limit {
            enumerate_branches(&branch.checkpoint.candidates(self.config))
        } else if branch.checkpoint.current != StateId::Initial {
            vec![StateId::Final]
        } else {
            Vec::new()
        };
        if offered.is_empty() {
            branch.answer = extract_answer(&branch.checkpoint.memory)?;
            return Ok(branch);
        }
        if depth < self.options.depth_limit {
            let cp = &branch.checkpoint;
            branch.prompt = Some(render_prompt(&cp.memory, cp.current, depth, &offered, &self.config.prompt));
        }
        let child = |s: StateId| self.child(&branch.checkpoint, &offered, s, &path, path_seed);
        branch.children = if self.options.parallel {
            offered.par_iter().map(|s| child(*s)).collect::<Result<Vec<_>, _>>()?
        } else {
            offered.iter().map(|s| child(*s)).collect::<Result<Vec<_>, _>>()?
        };
        Ok(branch)
    }

    fn child(
        &self,
        parent: &Checkpoint,
        offered: &[StateId],
        s: StateId,
        path: &[StateId],
        path_seed: u64,
    ) -> Result<Branch, TreeError> {
        self.claim_node()?;
        let mut path = path.to_vec();
        path.push(s);
        let seed = seed::derive(path_seed, &[s.canonical_rank() as u64 + 1]);
        let episode_id = format!("{}#{seed:016x}", self.task_id);
        let decision = PolicyDecision { chosen: s, rationale: "branch".into(), attempts: 1, fallback: false };
        let run = || {
            advance(parent, &decision, offered, self.agents, &episode_id, seed)
                .map_err(|source| TreeError::Engine { path: path_label(&path), source })
        };
        let first = run()?;
        let diverged = self.options.verify_replay && run()?.next != first.next;
        let terminal = first.outcome.is_some();
        self.grow(first.next, s, first.record.failed, terminal, path, seed, diverged)
    }
}

fn flatten(branch: Branch, parent: Option<usize>, out: &mut Vec<TrajectoryNode>, diverged: &mut Option<usize>) {
    let id = out.len();
    if branch.diverged && diverged.is_none() {
        *diverged = Some(id);
    }
    out.push(TrajectoryNode {
        id,
        parent,
        state: branch.state,
        failed: branch.failed,
        depth: branch.checkpoint.step,
        checkpoint: branch.checkpoint,
        children: Vec::new(),
        answer: branch.answer,
        leaf_score: None,
        value: None,
        prompt: branch.prompt,
    });
    for child in branch.children {
        let cid = out.len();
        out[id].children.push(cid);
        flatten(child, Some(id), out, diverged);
    }
}

pub fn expand_tree(
    task_id: &str,
    task: &TaskSpec,
    agents: &AgentRegistry,
    config: &AutomatonConfig,
    options: ExpandOptions,
    seed: u64,
) -> Result<TrajectoryTree, TreeError> {
    let root = Checkpoint::initial(task).map_err(|source| TreeError::Engine { path: "root".into(), source })?;
    expand_from(task_id, root, agents, config, options, seed)
}

/// Expands below an arbitrary checkpoint. `options.depth_limit` bounds the
/// absolute step, so a root at step `t` gets `depth_limit - t` decision levels.
pub fn expand_from(
    task_id: &str,
    root: Checkpoint,
    agents: &AgentRegistry,
    config: &AutomatonConfig,
    options: ExpandOptions,
    seed: u64,
) -> Result<TrajectoryTree, TreeError> {
    let ex = Expander { agents, config, options, task_id, count: AtomicUsize::new(1) };
    let root_seed = seed::derive_str(seed, task_id);
    let state = root.current;
    let branch = ex.grow(root, state, false, false, Vec::new(), root_seed, false)?;
    let mut nodes = Vec::new();
    let mut diverged = None;
    flatten(branch, None, &mut nodes, &mut diverged);
    if let Some(node) = diverged {
        return Err(TreeError::ReplayDivergence { node });
    }
    Ok(TrajectoryTree {
        task_id: task_id.to_string(),
        seed,
        depth_limit: options.depth_limit,
        replayable: options.verify_replay,
        gold: None,
        nodes,
    })
}

/// Scores every leaf against `gold`; leaves without an answer score 0.
pub fn score_leaves(tree: &mut TrajectoryTree, gold: &AnswerValue, kind: MetricKind) -> Result<(), TreeError> {
    for node in tree.nodes.iter_mut().filter(|n| n.is_leaf()) {
        node.leaf_score = Some(match &node.answer {
            Some(a) => metrics::score(kind, a, gold).map_err(|source| TreeError::Metric { node: node.id, source })?,
            None => 0.0,
        });
    }
    tree.gold = Some(gold.clone());
    Ok(())
}

/// V(leaf) = leaf score, V(node) = max over children. One reverse-preorder pass.
pub fn propagate_values(tree: &mut TrajectoryTree) -> Result<(), TreeError> {
    for i in (0..tree.nodes.len()).rev() {
        let v = if tree.nodes[i].is_leaf() {
            tree.nodes[i].leaf_score.ok_or(TreeError::Unscored { node: i })?
        } else {
            tree.nodes[i]
                .children
                .iter()
                .map(|c| tree.nodes[*c].value.expect("children follow their parent in preorder"))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        tree.nodes[i].value = Some(v);
    }
    Ok(())
}

/// The child a label at `node` would select: highest value, earliest in
/// canonical order on ties. `None` for leaves or before propagation.
pub fn best_child(tree: &TrajectoryTree, node: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut children = tree.nodes[node].children.clone();
    children.sort_by_key(|c| tree.nodes[*c].state.canonical_rank());
    for c in children {
        let v = tree.nodes[c].value?;
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub source_task_id: String,
    pub node_id: usize,
    #[serde(rename = "V_of_label")]
    pub v_of_label: f64,
    pub candidate_count: usize,
    /// Every child scored zero; the label is just the first candidate.
    pub all_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub input: String,
    pub output: String,
    pub meta: SftMeta,
}

/// One example per decision node with at least two children.
pub fn extract_labels(tree: &TrajectoryTree) -> Vec<SftExample> {
    let mut out = Vec::new();
    for node in &tree.nodes {
        let Some(prompt) = &node.prompt else { continue };
        if node.children.len() < 2 {
            continue;
        }
        let Some(best) = best_child(tree, node.id) else { continue };
        let v = tree.nodes[best].value.unwrap_or(0.0);
        let all_zero = node.children.iter().all(|c| tree.nodes[*c].value.unwrap_or(0.0) == 0.0);
        out.push(SftExample {
            input: prompt.text.clone(),
            output: render_reply(tree.nodes[best].state),
            meta: SftMeta {
                source_task_id: tree.task_id.clone(),
                node_id: node.id,
                v_of_label: v,
                candidate_count: prompt.candidates.len(),
                all_zero,
            },
        });
    }
    out
}

/// Writes JSON Lines ordered by (task id, node id); returns the count.
pub fn emit_dataset(examples: &[SftExample], sink: &mut dyn Write) -> io::Result<usize> {
    let mut sorted: Vec<&SftExample> = examples.iter().collect();
    sorted.sort_by(|a, b| (&a.meta.source_task_id, a.meta.node_id).cmp(&(&b.meta.source_task_id, b.meta.node_id)));
    for ex in &sorted {
        serde_json::to_writer(&mut *sink, ex).map_err(io::Error::other)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(sorted.len())
}

/// Expanded, scored and labelled tree for one task.
pub fn label_task(
    task: &LabeledTask,
    agents: &AgentRegistry,
    config: &AutomatonConfig,
    options: ExpandOptions,
    seed: u64,
) -> Result<(TrajectoryTree, Vec<SftExample>), TreeError> {
    let mut tree = expand_tree(&task.id, &task.task, agents, config, options, seed)?;
    score_leaves(&mut tree, &task.gold, task.task.metric_kind)?;
    propagate_values(&mut tree)?;
    let labels = extract_labels(&tree);
    Ok((tree, labels))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub tasks: usize,
    pub nodes: usize,
    pub examples: usize,
    pub all_zero_examples: usize,
}

/// Labels every task (in parallel when `options.parallel`), keeping task order.
pub fn generate_dataset(
    tasks: &[LabeledTask],
    agents: &AgentRegistry,
    config: &AutomatonConfig,
    options: ExpandOptions,
    seed: u64,
) -> Result<(Vec<SftExample>, DatasetStats), TreeError> {
    let run = |t: &LabeledTask| label_task(t, agents, config, options, seed);
    let results: Vec<_> = if options.parallel {
        tasks.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        tasks.iter().map(run).collect::<Result<_, _>>()?
    };
    let mut stats = DatasetStats { tasks: tasks.len(), ..DatasetStats::default() };
    let mut examples = Vec::new();
    for (tree, labels) in results {
        stats.nodes += tree.nodes.len();
        stats.examples += labels.len();
        stats.all_zero_examples += labels.iter().filter(|l| l.meta.all_zero).count();
        examples.extend(labels);
    }
    Ok((examples, stats))
}
