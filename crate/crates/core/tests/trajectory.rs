mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use common::{g1_memory, g2_memory, grounding_task, vqa_task, G1_INPUT, G2_INPUT};
use hyperstate_core::agents::mock::FnAgent;
use hyperstate_core::agents::{Agent, AgentCycleResult, AgentRegistry};
use hyperstate_core::automaton::{AutomatonConfig, CandidateMask, Checkpoint};
use hyperstate_core::model::{AnswerValue, Author, BoxCoords, MemoryDraft, MetricKind, StateId};
use hyperstate_core::prompter::{candidates_in_prompt, parse_reply};
use hyperstate_core::trajectory::{
    best_child, emit_dataset, expand_from, expand_tree, extract_labels, generate_dataset, label_task, node_bound,
    propagate_values, score_leaves, ExpandOptions, LabeledTask, TrajectoryNode, TrajectoryTree, TreeError,
};
use proptest::prelude::*;

const G_OUTPUT: &str = include_str!("fixtures/g_output.txt");

fn agent(state: StateId, f: impl Fn(u64) -> AgentCycleResult + Send + Sync + 'static) -> Arc<dyn Agent> {
    Arc::new(FnAgent::new(state, move |ctx| f(ctx.seed)))
}

fn chatty(state: StateId) -> Arc<dyn Agent> {
    agent(state, move |_| AgentCycleResult::ok(state, vec![MemoryDraft::feedback(state, format!("{state} ran"))], "ok"))
}

fn answering(state: StateId, answer: AnswerValue) -> Arc<dyn Agent> {
    agent(state, move |_| AgentCycleResult::ok(state, vec![MemoryDraft::answer(state, answer.clone())], "answered"))
}

fn registry(agents: Vec<Arc<dyn Agent>>) -> AgentRegistry {
    let mut r = AgentRegistry::new();
    for a in agents {
        r.insert(a).unwrap();
    }
    r
}

fn opts(depth_limit: u32) -> ExpandOptions {
    ExpandOptions { depth_limit, ..ExpandOptions::default() }
}

fn label(tree: &TrajectoryTree, gold: &AnswerValue) -> TrajectoryTree {
    let mut tree = tree.clone();
    let kind = tree.metric_kind();
    score_leaves(&mut tree, gold, kind).unwrap();
    propagate_values(&mut tree).unwrap();
    tree
}

#[test]
fn depth_one_shape() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(1), 3).unwrap();
    assert_eq!(tree.nodes.len(), 7);
    let root = tree.root();
    let kids: Vec<StateId> = root.children.iter().map(|c| tree.nodes[*c].state).collect();
    assert_eq!(kids, StateId::AGENTS);
    for c in &root.children {
        let n = &tree.nodes[*c];
        assert_eq!(n.depth, 1);
        assert!(n.prompt.is_none(), "forced Final is not a decision");
        assert_eq!(n.children.len(), 1);
        let leaf = &tree.nodes[n.children[0]];
        assert_eq!((leaf.state, leaf.depth), (StateId::Final, 2));
        assert!(leaf.is_leaf());
    }
    let tree = label(&tree, &AnswerValue::text("x"));
    assert_eq!(extract_labels(&tree).len(), 1);
}

#[test]
fn depth_zero_is_root_only() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(0), 3).unwrap();
    assert_eq!(tree.nodes.len(), 1);
    let tree = label(&tree, &AnswerValue::text("x"));
    assert_eq!(tree.root().leaf_score, Some(0.0));
    assert!(extract_labels(&tree).is_empty());
}

#[test]
fn only_paths_through_specialized_score() {
    let reg = registry(vec![
        answering(StateId::Specialized, AnswerValue::text("chair")),
        chatty(StateId::Oneshot),
        chatty(StateId::Stepwise),
    ]);
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(3), 1).unwrap();
    let tree = label(&tree, &AnswerValue::text("chair"));
    let mut leaves = 0;
    for leaf in tree.leaves() {
        leaves += 1;
        let through = tree.path(leaf.id).contains(&StateId::Specialized);
        assert_eq!(leaf.leaf_score, Some(if through { 1.0 } else { 0.0 }), "{:?}", tree.path(leaf.id));
    }
    assert!(leaves > 10);
    assert_eq!(tree.root().value, Some(1.0));
    let root_label = extract_labels(&tree).into_iter().find(|e| e.meta.node_id == 0).unwrap();
    assert_eq!(root_label.output, "<NextState>Specialized</NextState>");
}

#[test]
fn box_leaf_scores_iou() {
    let gold = BoxCoords::new(0.0, 0.0, 10.0, 10.0).unwrap();
    // Half the gold area overlapping a same-size box: 50 / 150.
    let pred = BoxCoords::new(5.0, 0.0, 15.0, 10.0).unwrap();
    let reg = registry(vec![
        answering(StateId::Specialized, AnswerValue::Box(pred)),
        chatty(StateId::Oneshot),
        chatty(StateId::Stepwise),
    ]);
    let tree = expand_tree("t", &grounding_task("q"), &reg, &AutomatonConfig::default(), opts(1), 1).unwrap();
    let tree = label(&tree, &AnswerValue::Box(gold));
    assert!((tree.root().value.unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn variant_mismatch_is_an_error() {
    let reg = registry(vec![
        answering(StateId::Specialized, AnswerValue::text("chair")),
        chatty(StateId::Oneshot),
        chatty(StateId::Stepwise),
    ]);
    let mut tree = expand_tree("t", &grounding_task("q"), &reg, &AutomatonConfig::default(), opts(1), 1).unwrap();
    let gold = AnswerValue::Box(BoxCoords::new(0.0, 0.0, 1.0, 1.0).unwrap());
    let err = score_leaves(&mut tree, &gold, MetricKind::GroundingIou).unwrap_err();
    assert!(matches!(err, TreeError::Metric { node: 2, .. }), "{err}");
}

#[test]
fn unscored_leaf_is_an_error() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let mut tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(1), 1).unwrap();
    assert_eq!(propagate_values(&mut tree), Err(TreeError::Unscored { node: 6 }));
}

/// A checkpoint at step 1 whose memory already holds the gold answer.
fn answered_checkpoint() -> Checkpoint {
    let mut memory = common::fresh(vqa_task("q"));
    memory
        .append(0, [MemoryDraft::transition(StateId::Oneshot), MemoryDraft::answer(StateId::Oneshot, AnswerValue::text("chair"))])
        .unwrap();
    Checkpoint { memory: memory.snapshot(), current: StateId::Oneshot, mask: CandidateMask::default(), step: 1 }
}

#[test]
fn ties_go_to_the_earliest_candidate() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let tree = expand_from("t", answered_checkpoint(), &reg, &AutomatonConfig::default(), opts(2), 1).unwrap();
    let tree = label(&tree, &AnswerValue::text("chair"));
    let root = tree.root();
    assert!(root.children.iter().all(|c| tree.nodes[*c].value == Some(1.0)));
    let ex = extract_labels(&tree).into_iter().find(|e| e.meta.node_id == 0).unwrap();
    assert_eq!(ex.output, "<NextState>Final</NextState>");
    assert!(!ex.meta.all_zero);
}

#[test]
fn all_zero_trees_still_label_and_flag() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(2), 1).unwrap();
    let tree = label(&tree, &AnswerValue::text("chair"));
    let labels = extract_labels(&tree);
    assert!(!labels.is_empty());
    for ex in labels {
        assert!(ex.meta.all_zero);
        let offered = candidates_in_prompt(&ex.input);
        assert_eq!(ex.output, format!("<NextState>{}</NextState>", offered[0].wire_name()));
    }
}

#[test]
fn dataset_examples_reproduce_the_reference_pairs() {
    let s = StateId::Stepwise;
    let cases = [
        (g1_memory(), AnswerValue::text("large"), G1_INPUT),
        (g2_memory(), AnswerValue::Box(BoxCoords::new(517.0, 0.0, 640.0, 382.0).unwrap()), G2_INPUT),
    ];
    for (memory, gold, expected_input) in cases {
        let reg = registry(vec![
            chatty(StateId::Specialized),
            chatty(StateId::Oneshot),
            answering(s, gold.clone()),
        ]);
        let root = Checkpoint { memory, current: s, mask: CandidateMask::default(), step: 2 };
        let tree = expand_from("g", root, &reg, &AutomatonConfig::default(), opts(3), 5).unwrap();
        let tree = label(&tree, &gold);
        let ex: Vec<_> = extract_labels(&tree).into_iter().filter(|e| e.meta.node_id == 0).collect();
        let mut sink = Vec::new();
        assert_eq!(emit_dataset(&ex, &mut sink).unwrap(), 1);
        let line: serde_json::Value = serde_json::from_slice(&sink).unwrap();
        assert_eq!(line["input"].as_str().unwrap(), expected_input);
        assert_eq!(line["output"].as_str().unwrap(), G_OUTPUT);
        assert_eq!(line["meta"]["candidate_count"], 4);
        assert_eq!(line["meta"]["V_of_label"], 1.0);
        let keys: BTreeSet<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, BTreeSet::from(["input", "meta", "output"]));
    }
}

#[test]
fn empty_dataset_writes_nothing() {
    let mut sink = Vec::new();
    assert_eq!(emit_dataset(&[], &mut sink).unwrap(), 0);
    assert!(sink.is_empty());
}

#[test]
fn failure_children_carry_the_mask() {
    let reg = registry(vec![
        chatty(StateId::Specialized),
        agent(StateId::Oneshot, |_| AgentCycleResult::unrecoverable(StateId::Oneshot, vec![], "broken")),
        chatty(StateId::Stepwise),
    ]);
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(2), 1).unwrap();
    let failed: Vec<&TrajectoryNode> = tree.nodes.iter().filter(|n| n.failed).collect();
    assert!(!failed.is_empty());
    for n in failed {
        assert_eq!(n.state, StateId::Oneshot);
        assert_eq!(n.checkpoint.current, StateId::Failure);
        assert!(n.checkpoint.mask.contains(StateId::Oneshot));
        for c in &n.children {
            assert_ne!(tree.nodes[*c].state, StateId::Oneshot);
        }
    }
}

#[test]
fn all_masked_branches_terminate() {
    let reg = registry(
        StateId::AGENTS
            .into_iter()
            .map(|s| agent(s, move |_| AgentCycleResult::unrecoverable(s, vec![], "broken")))
            .collect(),
    );
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(6), 1).unwrap();
    for leaf in tree.leaves() {
        let all = leaf.checkpoint.mask.all_agents_masked();
        assert!(all || leaf.state == StateId::Final, "{:?}", tree.path(leaf.id));
    }
    // With every agent failing the tree cannot grow past three agent levels.
    assert!(tree.nodes.iter().all(|n| n.depth <= 4));
}

#[test]
fn siblings_never_see_each_other() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(3), 1).unwrap();
    for node in &tree.nodes {
        let Some(p) = node.parent else { continue };
        let parent = &tree.nodes[p].checkpoint.memory;
        let mine = &node.checkpoint.memory;
        assert_eq!(&mine.entries()[..parent.len()], parent.entries());
        for e in &mine.entries()[parent.len()..] {
            assert!(e.author == Author::System || e.author == Author::State(node.state), "{e:?}");
        }
    }
}

#[test]
fn nondeterministic_backend_is_caught_at_its_node() {
    let counter = Arc::new(AtomicU64::new(0));
    let c = counter.clone();
    let reg = registry(vec![
        chatty(StateId::Specialized),
        agent(StateId::Oneshot, move |_| {
            let n = c.fetch_add(1, Ordering::SeqCst);
            AgentCycleResult::ok(StateId::Oneshot, vec![MemoryDraft::feedback(StateId::Oneshot, format!("run {n}"))], "ok")
        }),
        chatty(StateId::Stepwise),
    ]);
    let serial = ExpandOptions { parallel: false, ..opts(1) };
    let err = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), serial, 1).unwrap_err();
    // Preorder: root 0, Specialized 1, its Final 2, Oneshot 3.
    assert_eq!(err, TreeError::ReplayDivergence { node: 3 });

    let lax = ExpandOptions { verify_replay: false, ..serial };
    let tree = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), lax, 1).unwrap();
    assert!(!tree.replayable);
}

#[test]
fn node_guard_trips() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let small = ExpandOptions { max_nodes: 10, ..opts(3) };
    let err = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), small, 1).unwrap_err();
    assert_eq!(err, TreeError::TooLarge { limit: 10 });
}

#[test]
fn parallel_and_serial_trees_match() {
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let a = expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), opts(3), 9).unwrap();
    let b =
        expand_tree("t", &vqa_task("q"), &reg, &AutomatonConfig::default(), ExpandOptions { parallel: false, ..opts(3) }, 9)
            .unwrap();
    assert_eq!(a, b);
    assert!(a.nodes.len() as u64 <= node_bound(4, 3));
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<TrajectoryTree>(&json).unwrap(), a);
}

/// Agents that fail or answer depending on the cycle seed, so trees vary in
/// shape while staying replayable.
fn seeded_registry() -> AgentRegistry {
    registry(
        StateId::AGENTS
            .into_iter()
            .map(|s| {
                agent(s, move |seed| match hyperstate_core::seed::unit(seed) {
                    u if u < 0.25 => AgentCycleResult::unrecoverable(s, vec![], "flaky"),
                    u if u < 0.5 => AgentCycleResult::ok(s, vec![MemoryDraft::answer(s, AnswerValue::text("chair"))], "yes"),
                    _ => AgentCycleResult::ok(s, vec![MemoryDraft::feedback(s, "nothing yet")], "ok"),
                })
            })
            .collect(),
    )
}

fn tasks(n: usize) -> Vec<LabeledTask> {
    (0..n)
        .map(|i| LabeledTask {
            id: format!("task-{i:02}"),
            task: vqa_task(&format!("question {i}")),
            gold: AnswerValue::text("chair"),
            category: None,
        })
        .collect()
}

#[test]
fn ten_tasks_count_matches_hand_count() {
    // Non-failing agents, T=2: the root offers 3, each depth-1 node offers 4,
    // depth-2 nodes only get the forced Final. Four decisions per task.
    let reg = registry(StateId::AGENTS.into_iter().map(chatty).collect());
    let (examples, stats) = generate_dataset(&tasks(10), &reg, &AutomatonConfig::default(), opts(2), 1).unwrap();
    assert_eq!(examples.len(), 40);
    // Depth-2 nodes: 12, of which 3 are Final leaves and 9 get a forced Final.
    assert_eq!(stats.nodes, 10 * (1 + 3 + 12 + 9));

    // Varying shapes: count nodes with at least two children by walking each tree.
    let reg = seeded_registry();
    let ts = tasks(10);
    let (examples, _) = generate_dataset(&ts, &reg, &AutomatonConfig::default(), opts(2), 7).unwrap();
    let mut expected = 0;
    for t in &ts {
        let (tree, _) = label_task(t, &reg, &AutomatonConfig::default(), opts(2), 7).unwrap();
        expected += tree.nodes.iter().filter(|n| n.children.len() >= 2).count();
    }
    assert_eq!(examples.len(), expected);

    let mut sink = Vec::new();
    let n = emit_dataset(&examples, &mut sink).unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), n);
    let keys: Vec<(String, u64)> = lines
        .iter()
        .map(|l| (l["meta"]["source_task_id"].as_str().unwrap().to_string(), l["meta"]["node_id"].as_u64().unwrap()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn every_label_is_among_its_candidates() {
    let reg = seeded_registry();
    let (examples, _) = generate_dataset(&tasks(10), &reg, &AutomatonConfig::default(), opts(3), 11).unwrap();
    assert!(!examples.is_empty());
    for ex in &examples {
        let offered = candidates_in_prompt(&ex.input);
        let prompt = hyperstate_core::prompter::prompt_from_text(&ex.input, 0);
        let chosen = parse_reply(&ex.output, &prompt).unwrap();
        assert!(offered.contains(&chosen));
        assert_eq!(offered.len(), ex.meta.candidate_count);
    }
}

/// Independent shape for the value oracle: preorder lists of children.
#[derive(Debug, Clone)]
struct Shape {
    children: Vec<Vec<usize>>,
    scores: Vec<f64>,
}

fn shape_strategy() -> impl Strategy<Value = Shape> {
    // Branching per (depth, sibling) slot, then scores; depth <= 5, branching <= 4.
    (prop::collection::vec(0usize..=4, 1..400), prop::collection::vec(0u8..=10, 400)).prop_map(|(widths, scores)| {
        let mut children: Vec<Vec<usize>> = vec![Vec::new()];
        let mut depth = vec![0usize];
        let mut cursor = 0;
        fn grow(
            node: usize,
            children: &mut Vec<Vec<usize>>,
            depth: &mut Vec<usize>,
            widths: &[usize],
            cursor: &mut usize,
        ) {
            if depth[node] >= 5 || *cursor >= widths.len() || children.len() > 300 {
                return;
            }
            let w = widths[*cursor];
            *cursor += 1;
            for _ in 0..w {
                let c = children.len();
                children.push(Vec::new());
                depth.push(depth[node] + 1);
                children[node].push(c);
                grow(c, children, depth, widths, cursor);
            }
        }
        grow(0, &mut children, &mut depth, &widths, &mut cursor);
        let scores = (0..children.len()).map(|i| scores[i % scores.len()] as f64 / 10.0).collect();
        Shape { children, scores }
    })
}

fn tree_of(shape: &Shape) -> TrajectoryTree {
    let cp = Checkpoint::initial(&vqa_task("q")).unwrap();
    let mut nodes: Vec<TrajectoryNode> = shape
        .children
        .iter()
        .enumerate()
        .map(|(id, kids)| TrajectoryNode {
            id,
            parent: None,
            state: StateId::Initial,
            failed: false,
            depth: 0,
            checkpoint: cp.clone(),
            children: kids.clone(),
            answer: None,
            leaf_score: kids.is_empty().then_some(shape.scores[id]),
            value: None,
            prompt: None,
        })
        .collect();
    for id in 0..nodes.len() {
        for (i, c) in nodes[id].children.clone().into_iter().enumerate() {
            nodes[c].parent = Some(id);
            nodes[c].depth = nodes[id].depth + 1;
            nodes[c].state = [StateId::Final, StateId::Specialized, StateId::Oneshot, StateId::Stepwise][i];
        }
    }
    TrajectoryTree { task_id: "x".into(), seed: 0, depth_limit: 5, replayable: true, gold: None, nodes }
}

/// Maximum leaf score over every root-to-leaf path below `node`.
fn brute_max(shape: &Shape, node: usize) -> f64 {
    let mut stack = vec![node];
    let mut best = f64::NEG_INFINITY;
    while let Some(n) = stack.pop() {
        if shape.children[n].is_empty() {
            best = best.max(shape.scores[n]);
        }
        stack.extend(&shape.children[n]);
    }
    best
}

proptest! {
    #[test]
    fn values_match_path_enumeration(shape in shape_strategy()) {
        let mut tree = tree_of(&shape);
        propagate_values(&mut tree).unwrap();
        for n in &tree.nodes {
            prop_assert_eq!(n.value.unwrap(), brute_max(&shape, n.id));
            if let Some(p) = n.parent {
                prop_assert!(tree.nodes[p].value.unwrap() >= n.value.unwrap());
            }
        }
        // Greedy argmax descent lands on a leaf worth V(root).
        let mut at = 0;
        while let Some(next) = best_child(&tree, at) {
            at = next;
        }
        prop_assert!(tree.nodes[at].is_leaf());
        prop_assert_eq!(tree.nodes[at].leaf_score, tree.root().value);
    }
}
