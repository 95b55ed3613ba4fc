//! Program generator client: renders synthesis prompts and extracts
//! candidate `execute_command` definitions from chat completions.

use std::sync::OnceLock;

use regex::Regex;

use crate::llm::{ChatClient, ChatMessage, ChatRequest, Sampling};
use crate::templates::{self, Task};
use crate::transport::ServiceError;
use crate::vpdsl::{ProgramOrigin, ProgramSource, ENTRY_POINT};

/// Incorrect program plus rendered test feedback, for re-prompting.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub program: String,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramPrompt {
    pub task: Task,
    pub query: String,
    pub correction: Option<Correction>,
}

impl ProgramPrompt {
    pub fn new(task: Task, query: impl Into<String>) -> Self {
        ProgramPrompt { task, query: query.into(), correction: None }
    }

    pub fn render(&self) -> String {
        match &self.correction {
            None => templates::render_program_prompt(self.task, &self.query),
            Some(c) => templates::render_reprompt(self.task, &self.query, &c.program, &c.feedback),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProgClientError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("none of the {0} completions contained a `def {ENTRY_POINT}` block")]
    EmptyGeneration(usize),
    #[error("at least one program must be requested")]
    ZeroPrograms,
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_+-]*[^\n]*\n(.*?)```").unwrap())
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

fn def_block(text: &str) -> Option<String> {
    let header = format!("def {ENTRY_POINT}");
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.iter().position(|l| l.trim_start().starts_with(&header))?;
    let indent = indent_of(lines[start]);
    let mut end = start + 1;
    while end < lines.len() && (lines[end].trim().is_empty() || indent_of(lines[end]) > indent) {
        end += 1;
    }
    while end > start + 1 && lines[end - 1].trim().is_empty() {
        end -= 1;
    }
    let mut out = String::new();
    for l in &lines[start..end] {
        out.push_str(l.get(indent.min(indent_of(l))..).unwrap_or(""));
        out.push('\n');
    }
    Some(out)
}

/// First `def execute_command` block, searching fenced code first and then
/// the bare text. The block runs to the first line indented no deeper than
/// the header and is dedented to column 0.
pub fn extract_program(text: &str) -> Option<String> {
    fence_re().captures_iter(text).find_map(|c| def_block(&c[1])).or_else(|| def_block(text))
}

/// Sends one prompt asking for `n` samples; programs are indexed from
/// `first_index` in arrival order, skipping samples without a definition.
pub fn request_programs(
    prompt: String,
    n: usize,
    llm: &dyn ChatClient,
    sampling: &Sampling,
    first_index: usize,
) -> Result<Vec<ProgramSource>, ProgClientError> {
    if n == 0 {
        return Err(ProgClientError::ZeroPrograms);
    }
    let samples = llm.complete(&ChatRequest::new(vec![ChatMessage::user(prompt)], n, sampling))?;
    let programs: Vec<ProgramSource> = samples
        .iter()
        .filter_map(|s| extract_program(s))
        .enumerate()
        .map(|(i, text)| ProgramSource::new(text, ProgramOrigin::Llm, first_index + i))
        .collect();
    if programs.is_empty() {
        return Err(ProgClientError::EmptyGeneration(samples.len()));
    }
    Ok(programs)
}

pub fn generate_programs(
    task: Task,
    query: &str,
    n: usize,
    llm: &dyn ChatClient,
    sampling: &Sampling,
) -> Result<Vec<ProgramSource>, ProgClientError> {
    request_programs(ProgramPrompt::new(task, query).render(), n, llm, sampling, 0)
}
