//! Generator prompt templates for the stepwise and oneshot reasoners.
//!
//! Placeholders are `{name}`; [`fill`] substitutes them in one pass so
//! values containing braces (code, JSON) survive untouched.

use serde::{Deserialize, Serialize};

use crate::model::{EntryKind, Snapshot};

pub const INSTRUCTION_GENERATOR: &str = r#"You are an AI assistant designed to assist with compositional visual reasoning tasks providing valid step by step instruction for answering questions and understanding visual information.
Instruction Settings
--------------------
<InstructionSetting>{instruction_setting}</InstructionSetting>
Skills Overview
---------------
The following are the skills that you can use to solve the query:
<Skills>{skills}</Skills>
Task Description
----------------
Review the task description below to understand the problem context:
<TaskDescription>{task_title}{task_description}</TaskDescription>
Example Instructions
-------------------
How to Use these skills:
<Examples>{instruction_example}</Examples>
User Query
----------
This is the query you need to solve:
<Query>{query}</Query>
Current Step
------------
<Step>{current_step}</Step>
Previous Instructions
---------------------
<PreviousInstructions>{previous_instructions}</PreviousInstructions>
Previously Executed Code
-----------------------
<ExecutedCode>{previous_code}</ExecutedCode>
Execution Results
----------------
<ExecutionResults>{execution_results}</ExecutionResults>
Available Variables
-------------------
<Variables>{variables_info}</Variables>
-------------------
Based on the current context, generate possible next instructions to help solve the query. For each instruction, assign a probability score indicating how promising it will lead to the final answer.
Your response must be in this JSON array format:
{"instructions": [
        {"instruction": "specific instruction", "probability": 0.X},
        {"instruction": "another instruction", "probability": 0.Y},
        ...
]}"#;

pub const STEPWISE_CODE_GENERATOR: &str = r#"You are a helpful assistant specializing in visual reasoning tasks. Your goal is to generate Python code that solves a visual reasoning query using the provided code API and examples.
API Specification
-----------------
Use the following code API to guide your solution:
<CodeAPI>{code_api}</CodeAPI>
Task Description
----------------
Review the task description below to understand the problem context:
<TaskDescription>{task_title}{task_description}</TaskDescription>
Example Code
-----------
Here is an example that illustrates the expected format and approach:
<Examples>{code_example}</Examples>
User Query
----------
This is the query you need to solve:
<Query>{query}</Query>
Current Step
------------
<Step>{current_step}</Step>
Previous Instructions
---------------------
<PreviousInstructions>{previous_instructions}</PreviousInstructions>
Current Instruction
-------------------
<Instruction>{instruction}</Instruction>
Previously Executed Code
-----------------------
<ExecutedCode>{previous_code}</ExecutedCode>
Execution Results
----------------
<ExecutionResults>{execution_results}</ExecutionResults>
Available Variables
-------------------
<Variables>{variables_info}</Variables>
-------------------
Generate Python code that solves the query based on the current instruction. Your code should build upon previous steps and use the available variables. Use the code API as shown in the example. Enclose your code in <PythonCode></PythonCode> tags. If your code provides a final answer, assign it to a variable named "final_answer"."#;

pub const ONESHOT_CODE_GENERATOR: &str = r#"You are a helpful assistant specializing in visual reasoning tasks. Your goal is to generate Python code that solves a visual reasoning query using the provided code API and examples.
API Specification
-----------------
Use the following code API to guide your solution:
<CodeAPI>{code_api}</CodeAPI>
Task Description
----------------
Review the task description below to understand the problem context:
<TaskDescription>{task_title}{task_desc}</TaskDescription>
Example for Reference
---------------------
Here is an example that illustrates the expected format and approach:
<Example>{code_example}</Example>
User Query
----------
This is the query you need to solve:
<Query>{query}</Query>
Extra Context
----------------
<ExtraContext>{extra_context}</ExtraContext>
Code Initialization
-------------------
An instance of the "ImagePatch" class is already provided. Use the following initialization code as the starting point:
<ExecutedCode>
image_patch = ImagePatch(image)
</ExecutedCode>
Instruction:
------------
Generate Python code that utilizes the provided API and initialization to solve the query enclosed within the <PythonCode></PythonCode> block. Ensure your solution follows the structure and style of the given example. Ensure the variable "final_answer" is assigned to the result of the query."#;

/// Configuration text spliced into the generator prompts. Pure data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentResources {
    pub code_api: String,
    pub skills: String,
    pub instruction_setting: String,
    pub instruction_example: String,
    pub stepwise_code_example: String,
    pub oneshot_code_example: String,
}

/// Replaces `{key}` occurrences whose key is in `values`; other braces are kept.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after
            .find('}')
            .and_then(|close| values.iter().find(|(k, _)| *k == &after[..close]).map(|(_, v)| (close, *v)));
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Memory slices shared by the generator prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryView {
    pub task_title: String,
    pub task_description: String,
    pub query: String,
    pub previous_instructions: String,
    pub previous_code: String,
    pub execution_results: String,
    pub variables_info: String,
    /// 1-based number of the reasoning step about to be taken.
    pub current_step: usize,
}

impl MemoryView {
    pub fn of(memory: &Snapshot) -> Self {
        let join = |kind| memory.texts(kind).collect::<Vec<_>>().join("\n");
        let task = memory.task();
        let described = memory.texts(EntryKind::TaskDescription).count() > 0;
        let (task_title, task_description) = if described {
            (String::new(), join(EntryKind::TaskDescription))
        } else {
            (format!("{}\n", task.title), task.description.clone())
        };
        MemoryView {
            task_title,
            task_description,
            query: memory.texts(EntryKind::Query).last().unwrap_or(&task.query).to_string(),
            previous_instructions: join(EntryKind::Instruction),
            previous_code: join(EntryKind::Code),
            execution_results: join(EntryKind::Feedback),
            variables_info: memory
                .variables()
                .into_iter()
                .map(|(n, v)| format!("{n}: {v}"))
                .collect::<Vec<_>>()
                .join("\n"),
            current_step: memory.texts(EntryKind::Instruction).count() + 1,
        }
    }
}

fn with_note(base: &str, note: Option<&str>) -> String {
    match note {
        Some(n) if base.is_empty() => n.to_string(),
        Some(n) => format!("{base}\n{n}"),
        None => base.to_string(),
    }
}

/// `retry_note` carries the verifier's complaint about the previous attempt.
pub fn instruction_prompt(view: &MemoryView, res: &AgentResources, retry_note: Option<&str>) -> String {
    let step = view.current_step.to_string();
    let results = with_note(&view.execution_results, retry_note);
    fill(
        INSTRUCTION_GENERATOR,
        &[
            ("instruction_setting", &res.instruction_setting),
            ("skills", &res.skills),
            ("task_title", &view.task_title),
            ("task_description", &view.task_description),
            ("instruction_example", &res.instruction_example),
            ("query", &view.query),
            ("current_step", &step),
            ("previous_instructions", &view.previous_instructions),
            ("previous_code", &view.previous_code),
            ("execution_results", &results),
            ("variables_info", &view.variables_info),
        ],
    )
}

pub fn stepwise_code_prompt(
    view: &MemoryView,
    res: &AgentResources,
    instruction: &str,
    retry_note: Option<&str>,
) -> String {
    let step = view.current_step.to_string();
    let results = with_note(&view.execution_results, retry_note);
    fill(
        STEPWISE_CODE_GENERATOR,
        &[
            ("code_api", &res.code_api),
            ("task_title", &view.task_title),
            ("task_description", &view.task_description),
            ("code_example", &res.stepwise_code_example),
            ("query", &view.query),
            ("current_step", &step),
            ("previous_instructions", &view.previous_instructions),
            ("instruction", instruction),
            ("previous_code", &view.previous_code),
            ("execution_results", &results),
            ("variables_info", &view.variables_info),
        ],
    )
}

pub fn oneshot_code_prompt(view: &MemoryView, res: &AgentResources, retry_note: Option<&str>) -> String {
    let mut context = Vec::new();
    if !view.execution_results.is_empty() {
        context.push(view.execution_results.clone());
    }
    if !view.variables_info.is_empty() {
        context.push(view.variables_info.clone());
    }
    let extra = with_note(&context.join("\n"), retry_note);
    fill(
        ONESHOT_CODE_GENERATOR,
        &[
            ("code_api", &res.code_api),
            ("task_title", &view.task_title),
            ("task_desc", &view.task_description),
            ("code_example", &res.oneshot_code_example),
            ("query", &view.query),
            ("extra_context", &extra),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MemoryDraft, MetricKind, SharedMemory, StateId, TaskSpec};

    fn memory() -> Snapshot {
        let task = TaskSpec {
            title: "Counting".into(),
            description: "Count things.".into(),
            query: "How many cats?".into(),
            image_ref: "img-1".into(),
            metric_kind: MetricKind::VqaAccuracy,
        };
        let mut m = SharedMemory::new(task);
        m.append(
            0,
            [
                MemoryDraft::task_description("Counting\nCount things."),
                MemoryDraft::query("How many cats?"),
                MemoryDraft::code(StateId::Stepwise, "cats = {'a': 1}"),
                MemoryDraft::variable(StateId::Stepwise, "cats", "{'a': 1}"),
            ],
        )
        .unwrap();
        m.snapshot()
    }

    #[test]
    fn fill_leaves_unknown_braces() {
        assert_eq!(fill("a {x} {y} {\"k\": 1}", &[("x", "{1}")]), "a {1} {y} {\"k\": 1}");
        assert_eq!(fill("{", &[]), "{");
    }

    #[test]
    fn templates_have_no_unfilled_keys() {
        let view = MemoryView::of(&memory());
        let res = AgentResources::default();
        for p in [
            instruction_prompt(&view, &res, Some("previous output invalid: empty instruction list")),
            stepwise_code_prompt(&view, &res, "find cats", None),
            oneshot_code_prompt(&view, &res, None),
        ] {
            for key in ["{query}", "{task_title}", "{task_description}", "{task_desc}", "{variables_info}"] {
                assert!(!p.contains(key), "{key} left in prompt");
            }
            assert!(p.contains("<Query>How many cats?</Query>"));
            assert!(p.contains("<TaskDescription>Counting\nCount things.</TaskDescription>"));
        }
    }

    #[test]
    fn instruction_prompt_keeps_json_format_block() {
        let p = instruction_prompt(&MemoryView::of(&memory()), &AgentResources::default(), None);
        assert!(p.ends_with("{\"instructions\": [\n        {\"instruction\": \"specific instruction\", \"probability\": 0.X},\n        {\"instruction\": \"another instruction\", \"probability\": 0.Y},\n        ...\n]}"));
        assert!(p.contains("<Step>1</Step>"));
        assert!(p.contains("<Variables>cats: {'a': 1}</Variables>"));
    }

    #[test]
    fn oneshot_extra_context_carries_retry_note() {
        let p = oneshot_code_prompt(&MemoryView::of(&memory()), &AgentResources::default(), Some("previous attempt raised: boom"));
        assert!(p.contains("<ExtraContext>cats: {'a': 1}\nprevious attempt raised: boom</ExtraContext>"));
    }
}
