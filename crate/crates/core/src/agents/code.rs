//! Generator output parsing, structural verifiers, and a tiny literal-only
//! interpreter used as a deterministic sandbox stand-in.

use serde::Deserialize;

use super::ports::{CodeInterpreter, ExecutionOutput, ExecutionRequest, PortError};
use crate::model::BoxCoords;

pub const FINAL_ANSWER: &str = "final_answer";

const CODE_OPEN: &str = "<PythonCode>";
const CODE_CLOSE: &str = "</PythonCode>";

/// Body of the first `<PythonCode>` block, with an optional markdown fence
/// inside it removed.
pub fn extract_code(completion: &str) -> Result<String, String> {
    let start = completion.find(CODE_OPEN).ok_or_else(|| format!("missing {CODE_OPEN} block"))?;
    let body = &completion[start + CODE_OPEN.len()..];
    let end = body.find(CODE_CLOSE).ok_or_else(|| format!("unterminated {CODE_OPEN} block"))?;
    let mut code = body[..end].trim();
    if let Some(inner) = code.strip_prefix("```python").or_else(|| code.strip_prefix("```")) {
        code = inner.strip_suffix("```").unwrap_or(inner).trim();
    }
    if code.is_empty() {
        return Err("empty code block".into());
    }
    Ok(code.to_string())
}

/// Structural checks only: balanced brackets and quotes, and optionally an
/// assignment to `final_answer`.
pub fn verify_code(code: &str, require_final_answer: bool) -> Result<(), String> {
    let mut stack = Vec::new();
    for (n, line) in code.lines().enumerate() {
        let mut quote: Option<char> = None;
        let mut escaped = false;
        for c in line.chars() {
            if let Some(q) = quote {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
                continue;
            }
            match c {
                '#' => break,
                '"' | '\'' => quote = Some(c),
                '(' | '[' | '{' => stack.push(c),
                ')' | ']' | '}' => {
                    let want = match c {
                        ')' => '(',
                        ']' => '[',
                        _ => '{',
                    };
                    if stack.pop() != Some(want) {
                        return Err(format!("unbalanced '{c}' on line {}", n + 1));
                    }
                }
                _ => {}
            }
        }
        if quote.is_some() {
            return Err(format!("unterminated string on line {}", n + 1));
        }
    }
    if let Some(c) = stack.last() {
        return Err(format!("unclosed '{c}'"));
    }
    if require_final_answer && !code.lines().any(|l| assigned_name(l) == Some(FINAL_ANSWER)) {
        return Err(format!("code never assigns {FINAL_ANSWER}"));
    }
    Ok(())
}

fn assigned_name(line: &str) -> Option<&str> {
    let (lhs, rhs) = line.split_once('=')?;
    if rhs.starts_with('=') || lhs.ends_with(['!', '<', '>']) {
        return None;
    }
    let name = lhs.trim();
    is_identifier(name).then_some(name)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstruction {
    pub instruction: String,
    pub probability: f64,
}

#[derive(Deserialize)]
struct InstructionList {
    instructions: Vec<RawInstruction>,
}

#[derive(Deserialize)]
struct RawInstruction {
    instruction: String,
    probability: f64,
}

/// Parses the `{"instructions": [...]}` object out of a completion.
pub fn parse_instructions(completion: &str) -> Result<Vec<ScoredInstruction>, String> {
    let start = completion.find('{').ok_or("no JSON object in instruction output")?;
    let end = completion.rfind('}').ok_or("no JSON object in instruction output")?;
    if end < start {
        return Err("no JSON object in instruction output".into());
    }
    let list: InstructionList =
        serde_json::from_str(&completion[start..=end]).map_err(|e| format!("malformed instruction JSON: {e}"))?;
    let mut out = Vec::with_capacity(list.instructions.len());
    for raw in list.instructions {
        if raw.instruction.trim().is_empty() {
            return Err("blank instruction text".into());
        }
        if !(0.0..=1.0).contains(&raw.probability) {
            return Err(format!("probability {} outside [0, 1]", raw.probability));
        }
        out.push(ScoredInstruction { instruction: raw.instruction.trim().to_string(), probability: raw.probability });
    }
    if out.is_empty() {
        return Err("empty instruction list".into());
    }
    Ok(out)
}

/// Highest probability; ties go to the first listed.
pub fn select_instruction(list: &[ScoredInstruction]) -> Option<&ScoredInstruction> {
    list.iter().fold(None, |best: Option<&ScoredInstruction>, c| match best {
        Some(b) if b.probability >= c.probability => Some(b),
        _ => Some(c),
    })
}

/// Evaluates straight-line code made of assignments whose right-hand side is
/// a literal, a known variable name or `ImagePatch(x1, y1, x2, y2)`, plus
/// `print(<literal>)` and `raise`. Blank lines and comments are skipped;
/// anything else is a runtime error. Known variables come from
/// [`ExecutionRequest::variables`]. Pure.
#[derive(Debug, Clone, Copy, Default)]
pub struct LiteralInterpreter;

impl LiteralInterpreter {
    fn eval(expr: &str, env: &[(String, String)]) -> Result<String, String> {
        let expr = expr.trim();
        if is_identifier(expr) {
            return match expr {
                "True" | "False" | "None" => Ok(expr.to_string()),
                _ => env
                    .iter()
                    .rev()
                    .find(|(n, _)| n == expr)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| format!("NameError: name '{expr}' is not defined")),
            };
        }
        if let Some(args) = expr.strip_prefix("ImagePatch(").and_then(|r| r.strip_suffix(')')) {
            let b = BoxCoords::parse(&format!("({args})")).map_err(|e| format!("ValueError: {e}"))?;
            return Ok(b.to_string());
        }
        if expr.parse::<f64>().is_ok() {
            return Ok(expr.to_string());
        }
        for q in ['"', '\''] {
            if expr.len() >= 2 && expr.starts_with(q) && expr.ends_with(q) && !expr[1..expr.len() - 1].contains(q) {
                return Ok(expr[1..expr.len() - 1].to_string());
            }
        }
        if (expr.starts_with('[') && expr.ends_with(']')) || (expr.starts_with('{') && expr.ends_with('}')) {
            return Ok(expr.to_string());
        }
        Err(format!("UnsupportedExpression: {expr}"))
    }

    pub fn run(code: &str, known: &[(String, String)]) -> ExecutionOutput {
        let mut env: Vec<(String, String)> = known.to_vec();
        let mut out = ExecutionOutput::default();
        for line in code.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let result: Result<(), String> = if line == "raise" {
                Err("RuntimeError".into())
            } else if let Some(rest) = line.strip_prefix("raise ") {
                Err(rest.trim().to_string())
            } else if let Some(arg) = line.strip_prefix("print(").and_then(|r| r.strip_suffix(')')) {
                Self::eval(arg, &env).map(|v| out.output.push(v))
            } else if let Some(name) = assigned_name(line) {
                let rhs = &line[line.find('=').expect("assignment has '='") + 1..];
                Self::eval(rhs, &env).map(|v| {
                    env.push((name.to_string(), v.clone()));
                    match out.variables.iter_mut().find(|(n, _)| n == name) {
                        Some(slot) => slot.1 = v,
                        None => out.variables.push((name.to_string(), v)),
                    }
                })
            } else {
                Err(format!("UnsupportedStatement: {line}"))
            };
            if let Err(e) = result {
                out.error = Some(e);
                break;
            }
        }
        out
    }
}

impl CodeInterpreter for LiteralInterpreter {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutput, PortError> {
        Ok(Self::run(&request.code, &request.variables))
    }
}
