//! Restricted Python-like DSL for visual programs.
//!
//! A program is a single `def execute_command(image):` whose body may use a
//! whitelisted subset of Python and the `ImagePatch` host API. Everything
//! else is rejected at parse time.

mod ast;
mod check;
mod interp;
mod lexer;
mod parser;
mod value;

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use ast::{Pos, ProgramAst};
pub use interp::{crop_directional, Side, STEP_BUDGET};
pub use parser::ENTRY_POINT;

use crate::perception::{ImageHandle, Perception, PerceptionError};

/// Default wall-clock cap for a single program execution, in seconds.
pub const DEFAULT_BUDGET_SECS: f64 = 120.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("line {line}, column {column}: {message}")]
pub struct CompileError {
    pub line: u32,
    pub column: u32,
    pub message: String,
}

impl CompileError {
    pub fn new(pos: Pos, message: impl Into<String>) -> Self {
        CompileError { line: pos.line, column: pos.col, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramOrigin {
    Llm,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProgramSource {
    pub text: String,
    pub origin: ProgramOrigin,
    pub index: usize,
}

impl ProgramSource {
    pub fn new(text: impl Into<String>, origin: ProgramOrigin, index: usize) -> Self {
        ProgramSource { text: text.into(), origin, index }
    }

    pub fn fixture(text: impl Into<String>, index: usize) -> Self {
        Self::new(text, ProgramOrigin::Fixture, index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Answer,
    CompileError,
    RuntimeError,
    Timeout,
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeKind::Answer => "answer",
            OutcomeKind::CompileError => "compile_error",
            OutcomeKind::RuntimeError => "runtime_error",
            OutcomeKind::Timeout => "timeout",
        })
    }
}

/// Result of running one program on one image. Exactly one of `answer` and
/// `diagnostic` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    /// Wall-clock seconds. Not serialized so that run artifacts are
    /// reproducible byte-for-byte.
    #[serde(skip)]
    pub elapsed: f64,
}

impl ExecutionOutcome {
    pub fn answer(text: impl Into<String>) -> Self {
        ExecutionOutcome { kind: OutcomeKind::Answer, answer: Some(text.into()), diagnostic: None, elapsed: 0.0 }
    }

    pub fn failure(kind: OutcomeKind, diagnostic: impl Into<String>) -> Self {
        debug_assert!(kind != OutcomeKind::Answer);
        ExecutionOutcome { kind, answer: None, diagnostic: Some(diagnostic.into()), elapsed: 0.0 }
    }

    pub fn compile_error(err: &CompileError) -> Self {
        Self::failure(OutcomeKind::CompileError, err.to_string())
    }

    pub fn is_answer(&self) -> bool {
        self.kind == OutcomeKind::Answer
    }

    /// Answer text, or empty for failures.
    pub fn answer_text(&self) -> &str {
        self.answer.as_deref().unwrap_or("")
    }
}

/// Parses and statically checks a program.
pub fn parse_program(source: &ProgramSource) -> Result<ProgramAst, CompileError> {
    parse_str(&source.text)
}

pub fn parse_str(text: &str) -> Result<ProgramAst, CompileError> {
    if text.trim().is_empty() {
        return Err(CompileError::new(Pos { line: 1, col: 1 }, "empty program"));
    }
    let ast = parser::parse(text)?;
    check::check(&ast)?;
    Ok(ast)
}

/// Runs a parsed program. Backend failures become runtime errors; use
/// [`execute_checked`] to keep them distinguishable.
pub fn execute(ast: &ProgramAst, image: &ImageHandle, backend: &dyn Perception, budget_secs: f64) -> ExecutionOutcome {
    match execute_checked(ast, image, backend, budget_secs) {
        Ok(outcome) => outcome,
        Err(e) => ExecutionOutcome::failure(OutcomeKind::RuntimeError, format!("BackendUnavailable: {e}")),
    }
}

/// Like [`execute`] but surfaces perception failures as errors instead of
/// folding them into the outcome.
pub fn execute_checked(
    ast: &ProgramAst,
    image: &ImageHandle,
    backend: &dyn Perception,
    budget_secs: f64,
) -> Result<ExecutionOutcome, PerceptionError> {
    let start = Instant::now();
    let budget = Duration::from_secs_f64(budget_secs.max(0.0));
    let mut outcome = interp::run(ast, image, backend, start + budget)?;
    let elapsed = start.elapsed();
    if outcome.is_answer() && elapsed > budget {
        outcome = ExecutionOutcome::failure(
            OutcomeKind::Timeout,
            format!("TimeoutError: execution exceeded {budget_secs} s"),
        );
    }
    outcome.elapsed = elapsed.as_secs_f64();
    Ok(outcome)
}

/// Parses then executes; compile errors become outcomes.
pub fn run_source(text: &str, image: &ImageHandle, backend: &dyn Perception, budget_secs: f64) -> ExecutionOutcome {
    match parse_str(text) {
        Ok(ast) => execute(&ast, image, backend, budget_secs),
        Err(e) => ExecutionOutcome::compile_error(&e),
    }
}
