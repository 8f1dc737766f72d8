use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperstate_core::agents::AgentRegistry;
use hyperstate_core::automaton::{run_episode, AutomatonConfig};
use hyperstate_core::metrics;
use hyperstate_core::model::{AnswerValue, Outcome, TaskSpec};
use hyperstate_core::policy::{LlmPolicy, RandomPolicy, ScriptedPolicy, TransitionPolicy};
use hyperstate_core::trajectory::{
    emit_dataset, label_task, propagate_values, score_leaves, ExpandOptions, LabeledTask, TrajectoryTree,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::Config;
use crate::eval::{eval_dataset, llm_decider, random_decider, read_dataset, EvalReport, TreeOracle};
use crate::scenario::{synthetic_registry, Scenario};
use crate::sim::{mock_controller, simulate, OraclePolicy, SimPolicy, MOCK_MODEL_ID};

#[derive(Debug, Parser)]
#[command(name = "hyperstate", version, about = "Run, label and benchmark hierarchical agent episodes")]
pub struct Cli {
    /// TOML config: endpoints, model ids, retry policy, seed.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode per task and write traces.
    Run(RunArgs),
    /// Expand trajectory trees and write the controller dataset.
    GenData(GenDataArgs),
    /// Recompute values on a persisted tree and print them.
    ScoreTree(ScoreTreeArgs),
    /// Compare policies on a synthetic scenario.
    Simulate(SimulateArgs),
    /// Next-state exact match of a policy on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunPolicy {
    Random,
    Scripted,
    Llm,
    LlmMock,
    Oracle,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Tasks, one JSON object per line.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    pub policy: RunPolicy,
    /// State list for the scripted policy.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Use synthetic agents from this scenario instead of the configured backend.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Labelled tasks, one JSON object per line.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub depth: u32,
    /// Output JSON Lines file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Also persist every tree here as `<task id>.json`.
    #[arg(long)]
    pub trees: Option<PathBuf>,
    #[arg(long, default_value_t = ExpandOptions::default().max_nodes)]
    pub max_nodes: usize,
    /// Skip the run-twice replay check (stochastic backends).
    #[arg(long)]
    pub no_verify_replay: bool,
}

#[derive(Debug, Args)]
pub struct ScoreTreeArgs {
    #[arg(long)]
    pub tree: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Defaults to the shipped scenario.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "random,oracle,llm-mock,exhaustive")]
    pub policies: Vec<SimPolicy>,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalPolicy {
    Random,
    Llm,
    LlmMock,
    TreeOracle,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    pub policy: EvalPolicy,
    /// Persisted trees for `tree-oracle`.
    #[arg(long)]
    pub trees: Option<PathBuf>,
    /// Scenario for `llm-mock`; defaults to the shipped one.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Configuration problems exit 2, everything else that fails exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Task(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Task(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Task(e) => write!(f, "{e:#}"),
        }
    }
}

trait Tag<T> {
    fn config(self) -> Result<T, CliError>;
    fn task(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn config(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.into()))
    }
    fn task(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Task(e.into()))
    }
}

/// A task line; `gold` and `category` are optional for plain runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLine {
    pub id: String,
    #[serde(flatten)]
    pub task: TaskSpec,
    #[serde(default)]
    pub gold: Option<AnswerValue>,
    #[serde(default)]
    pub category: Option<String>,
}

impl TaskLine {
    fn labeled(&self) -> Option<LabeledTask> {
        Some(LabeledTask {
            id: self.id.clone(),
            task: self.task.clone(),
            gold: self.gold.clone()?,
            category: self.category.clone(),
        })
    }
}

pub fn read_tasks(path: &Path) -> anyhow::Result<Vec<TaskLine>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading tasks {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    if out.is_empty() {
        bail!("{} holds no tasks", path.display());
    }
    Ok(out)
}

pub fn write_tasks(path: &Path, tasks: &[LabeledTask]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn labeled_all(tasks: &[TaskLine]) -> anyhow::Result<Vec<LabeledTask>> {
    tasks.iter().map(|t| t.labeled().ok_or_else(|| anyhow!("task {} has no gold answer", t.id))).collect()
}

fn load_scenario(path: Option<&Path>) -> anyhow::Result<Scenario> {
    Ok(match path {
        Some(p) => Scenario::load(p).with_context(|| format!("scenario {}", p.display()))?,
        None => Scenario::default_scenario(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn engine_config(cfg: &Config, max_steps: Option<u32>) -> AutomatonConfig {
    let mut c = AutomatonConfig { prompt: cfg.prompt, ..AutomatonConfig::default() };
    if let Some(n) = max_steps.or(cfg.max_steps) {
        c.max_steps = n;
    }
    c
}

#[derive(Debug, Serialize)]
struct RunSummary {
    id: String,
    status: String,
    steps: usize,
    answer: Option<AnswerValue>,
    score: Option<f64>,
    error: Option<String>,
}

fn outcome_status(o: &Outcome) -> &'static str {
    match o {
        Outcome::Answered { .. } => "answered",
        Outcome::Exhausted { .. } => "exhausted",
        Outcome::Failed { .. } => "failed",
    }
}

fn cmd_run(cfg: &Config, args: &RunArgs) -> Result<i32, CliError> {
    let tasks = read_tasks(&args.tasks).config()?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let engine = engine_config(cfg, args.max_steps);
    let scenario = match &args.scenario {
        Some(p) => Some(load_scenario(Some(p)).config()?),
        None => None,
    };
    let agents: AgentRegistry = match &scenario {
        Some(s) => synthetic_registry(s, &labeled_all(&tasks).config()?),
        None => cfg.agents().config()?,
    };
    let base: Option<Box<dyn TransitionPolicy>> = match args.policy {
        RunPolicy::Random => Some(Box::new(RandomPolicy)),
        RunPolicy::Scripted => {
            let path = args.script.as_ref().ok_or_else(|| anyhow!("--policy scripted needs --script")).config()?;
            Some(Box::new(ScriptedPolicy::from_file(path).config()?))
        }
        RunPolicy::Llm => Some(Box::new(cfg.llm_policy().config()?)),
        RunPolicy::LlmMock => {
            let s = scenario.as_ref().ok_or_else(|| anyhow!("--policy llm-mock needs --scenario")).config()?;
            Some(Box::new(LlmPolicy::new(mock_controller(s), MOCK_MODEL_ID).with_prompt_config(engine.prompt)))
        }
        RunPolicy::Oracle => None,
    };
    fs::create_dir_all(args.out.join("traces")).config()?;
    let mut summary = Vec::new();
    let mut failed = false;
    for (i, t) in tasks.iter().enumerate() {
        let ep_seed = hyperstate_core::seed::derive(seed, &[i as u64]);
        let oracle;
        let policy: &dyn TransitionPolicy = match &base {
            Some(p) => p.as_ref(),
            None => {
                let s = scenario.as_ref().ok_or_else(|| anyhow!("--policy oracle needs --scenario")).config()?;
                let c = t
                    .category
                    .as_deref()
                    .and_then(|c| s.category(c))
                    .ok_or_else(|| anyhow!("task {} has no known category", t.id))
                    .config()?;
                oracle = OraclePolicy::new(c.ranking.clone());
                &oracle
            }
        };
        match run_episode(&t.task, &agents, policy, &engine, ep_seed) {
            Ok(trace) => {
                write_json(&args.out.join("traces").join(format!("{}.json", t.id)), &trace).task()?;
                let answer = trace.outcome.answer().cloned();
                let score = match (&answer, &t.gold) {
                    (Some(a), Some(g)) => Some(metrics::score(t.task.metric_kind, a, g).task()?),
                    (None, Some(_)) => Some(0.0),
                    _ => None,
                };
                failed |= matches!(trace.outcome, Outcome::Failed { .. });
                info!(task = %t.id, status = outcome_status(&trace.outcome), steps = trace.steps.len(), "episode done");
                summary.push(RunSummary {
                    id: t.id.clone(),
                    status: outcome_status(&trace.outcome).into(),
                    steps: trace.steps.len(),
                    answer,
                    score,
                    error: None,
                });
            }
            Err(e) => {
                warn!(task = %t.id, error = %e, "episode aborted");
                failed = true;
                summary.push(RunSummary {
                    id: t.id.clone(),
                    status: "error".into(),
                    steps: 0,
                    answer: None,
                    score: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    write_json(&args.out.join("summary.json"), &summary).task()?;
    for s in &summary {
        println!(
            "{}\t{}\t{} steps\t{}",
            s.id,
            s.status,
            s.steps,
            s.score.map_or("-".to_string(), |v| format!("{v:.2}"))
        );
    }
    Ok(i32::from(failed))
}

#[derive(Debug, Default, Serialize)]
struct GenStats {
    tasks: usize,
    nodes: usize,
    examples: usize,
    all_zero_examples: usize,
}

fn cmd_gen_data(cfg: &Config, args: &GenDataArgs) -> Result<i32, CliError> {
    let tasks = labeled_all(&read_tasks(&args.tasks).config()?).config()?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let engine = engine_config(cfg, None);
    let agents = match &args.scenario {
        Some(p) => synthetic_registry(&load_scenario(Some(p)).config()?, &tasks),
        None => cfg.agents().config()?,
    };
    let options = ExpandOptions {
        depth_limit: args.depth,
        max_nodes: args.max_nodes,
        verify_replay: !args.no_verify_replay,
        parallel: args.parallel > 1,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.parallel.max(1)).build().task()?;
    let results = pool
        .install(|| {
            tasks.par_iter().map(|t| label_task(t, &agents, &engine, options, seed)).collect::<Result<Vec<_>, _>>()
        })
        .task()?;
    let mut stats = GenStats { tasks: tasks.len(), ..GenStats::default() };
    let mut examples = Vec::new();
    for (tree, labels) in &results {
        stats.nodes += tree.nodes.len();
        stats.all_zero_examples += labels.iter().filter(|l| l.meta.all_zero).count();
        examples.extend(labels.iter().cloned());
        if let Some(dir) = &args.trees {
            write_json(&dir.join(format!("{}.json", tree.task_id)), tree).task()?;
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).task()?;
    }
    let mut sink = BufWriter::new(fs::File::create(&args.out).with_context(|| args.out.display().to_string()).task()?);
    stats.examples = emit_dataset(&examples, &mut sink).task()?;
    println!("{}", serde_json::to_string(&stats).task()?);
    Ok(0)
}

fn cmd_score_tree(args: &ScoreTreeArgs) -> Result<i32, CliError> {
    let text = fs::read_to_string(&args.tree).with_context(|| args.tree.display().to_string()).config()?;
    let mut tree: TrajectoryTree =
        serde_json::from_str(&text).with_context(|| format!("malformed tree {}", args.tree.display())).config()?;
    if let Some(gold) = tree.gold.clone() {
        let kind = tree.metric_kind();
        score_leaves(&mut tree, &gold, kind).task()?;
    }
    propagate_values(&mut tree).task()?;
    println!("{:>6} {:>6} {:>5} {:<18} {:>6} {:>6}", "node", "parent", "depth", "state", "leaf", "value");
    for n in &tree.nodes {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let state = if n.failed { format!("{}(failed)", n.state) } else { n.state.to_string() };
        println!(
            "{:>6} {:>6} {:>5} {:<18} {:>6} {:>6}",
            n.id,
            n.parent.map_or("-".to_string(), |p| p.to_string()),
            n.depth,
            state,
            fmt(n.leaf_score),
            fmt(n.value)
        );
    }
    Ok(0)
}

fn cmd_simulate(cfg: &Config, args: &SimulateArgs) -> Result<i32, CliError> {
    let scenario = load_scenario(args.scenario.as_deref()).config()?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let report = simulate(&scenario, &args.policies, args.episodes, seed, &engine_config(cfg, args.max_steps)).task()?;
    let table = report.to_table();
    if let Some(out) = &args.out {
        write_json(&out.join("report.json"), &report).task()?;
        fs::write(out.join("report.txt"), &table).task()?;
    }
    print!("{table}");
    Ok(0)
}

fn load_trees(dir: &Path) -> anyhow::Result<Vec<TrajectoryTree>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading trees {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let mut t: TrajectoryTree = serde_json::from_str(&fs::read_to_string(p)?)
                .with_context(|| format!("malformed tree {}", p.display()))?;
            propagate_values(&mut t)?;
            Ok(t)
        })
        .collect()
}

fn cmd_eval(cfg: &Config, args: &EvalArgs) -> Result<i32, CliError> {
    let text = fs::read_to_string(&args.dataset).with_context(|| args.dataset.display().to_string()).config()?;
    let examples = read_dataset(&text).config()?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let report: EvalReport = match args.policy {
        EvalPolicy::Random => eval_dataset(&examples, random_decider(seed)),
        EvalPolicy::Llm => {
            let policy = cfg.llm_policy().config()?;
            eval_dataset(&examples, llm_decider(&policy, seed))
        }
        EvalPolicy::LlmMock => {
            let s = load_scenario(args.scenario.as_deref()).config()?;
            let policy = LlmPolicy::new(mock_controller(&s), MOCK_MODEL_ID);
            eval_dataset(&examples, llm_decider(&policy, seed))
        }
        EvalPolicy::TreeOracle => {
            let dir = args.trees.as_ref().ok_or_else(|| anyhow!("--policy tree-oracle needs --trees")).config()?;
            let oracle = TreeOracle::new(&load_trees(dir).config()?);
            let mut misses = 0;
            let r = eval_dataset(&examples, |_, p| {
                Ok(oracle.decide(p).unwrap_or_else(|| {
                    misses += 1;
                    p.candidates[0]
                }))
            });
            if misses > 0 {
                warn!(misses, "prompts not found in any tree");
            }
            r
        }
    }
    .task()?;
    println!("{}", serde_json::to_string(&report).task()?);
    Ok(0)
}

/// Runs a parsed command line; returns the process exit code.
pub fn execute(cli: &Cli) -> Result<i32, CliError> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).config()?,
        None => Config::default(),
    };
    match &cli.command {
        Command::Run(a) => cmd_run(&cfg, a),
        Command::GenData(a) => cmd_gen_data(&cfg, a),
        Command::ScoreTree(a) => cmd_score_tree(a),
        Command::Simulate(a) => cmd_simulate(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
    }
}
