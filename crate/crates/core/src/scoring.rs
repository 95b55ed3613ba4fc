//! Per-test scoring, aggregation into a program score, and best-program
//! selection.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::perception::{ImageHandle, Perception, PerceptionError};
use crate::text::normalize_answer;
use crate::vpdsl::{self, CompileError, ExecutionOutcome, OutcomeKind, ProgramAst, ProgramSource, DEFAULT_BUDGET_SECS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Mean,
    Max,
    Min,
}

impl std::str::FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            "min" => Ok(Aggregator::Min),
            other => Err(format!("unknown aggregator '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub runtime_penalty: f64,
    pub compile_penalty: f64,
    pub aggregator: Aggregator,
    /// Wall-clock cap per program execution.
    pub budget_secs: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { runtime_penalty: 0.1, compile_penalty: 0.1, aggregator: Aggregator::Mean, budget_secs: DEFAULT_BUDGET_SECS }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("test suite is empty")]
    EmptySuite,
    #[error("program pool is empty")]
    EmptyPool,
    #[error("unit test {0} has no image")]
    MissingImage(usize),
    #[error(transparent)]
    Backend(#[from] PerceptionError),
}

/// A visual unit test: caption, expected answer and, once synthesized, the
/// image.
#[derive(Debug, Clone, Serialize)]
pub struct UnitTest {
    pub caption: String,
    pub expected: String,
    pub image: Option<ImageHandle>,
}

impl UnitTest {
    pub fn new(caption: impl Into<String>, expected: impl Into<String>, image: ImageHandle) -> Self {
        UnitTest { caption: caption.into(), expected: expected.into(), image: Some(image) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub caption: String,
    pub expected: String,
    pub image_id: String,
    pub outcome: ExecutionOutcome,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredProgram {
    pub source: ProgramSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile_error: Option<CompileError>,
    pub per_test: Vec<TestResult>,
    pub aggregate: f64,
    #[serde(skip)]
    ast: Option<Arc<ProgramAst>>,
}

impl ScoredProgram {
    pub fn ast(&self) -> Option<&ProgramAst> {
        self.ast.as_deref()
    }

    /// Runs the program on `image`; compile failures become outcomes.
    pub fn execute(&self, image: &ImageHandle, backend: &dyn Perception, budget_secs: f64) -> Result<ExecutionOutcome, PerceptionError> {
        match (&self.ast, &self.compile_error) {
            (Some(ast), _) => vpdsl::execute_checked(ast, image, backend, budget_secs),
            (None, Some(e)) => Ok(ExecutionOutcome::compile_error(e)),
            (None, None) => match vpdsl::parse_program(&self.source) {
                Ok(ast) => vpdsl::execute_checked(&ast, image, backend, budget_secs),
                Err(e) => Ok(ExecutionOutcome::compile_error(&e)),
            },
        }
    }
}

pub fn score_test(outcome: &ExecutionOutcome, expected: &str, cfg: &ScoreConfig) -> f64 {
    match outcome.kind {
        OutcomeKind::CompileError => -cfg.compile_penalty,
        OutcomeKind::RuntimeError | OutcomeKind::Timeout => -cfg.runtime_penalty,
        OutcomeKind::Answer => {
            if normalize_answer(outcome.answer_text()) == normalize_answer(expected) {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn aggregate(scores: &[f64], cfg: &ScoreConfig) -> Result<f64, ScoreError> {
    if scores.is_empty() {
        return Err(ScoreError::EmptySuite);
    }
    Ok(match cfg.aggregator {
        Aggregator::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregator::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Parses once, then executes on every test image. Perception failures
/// abort scoring instead of being charged to the program.
pub fn score_program(
    source: &ProgramSource,
    suite: &[UnitTest],
    backend: &dyn Perception,
    cfg: &ScoreConfig,
) -> Result<ScoredProgram, ScoreError> {
    if suite.is_empty() {
        return Err(ScoreError::EmptySuite);
    }
    let (ast, compile_error) = match vpdsl::parse_program(source) {
        Ok(ast) => (Some(Arc::new(ast)), None),
        Err(e) => (None, Some(e)),
    };
    let mut per_test = Vec::with_capacity(suite.len());
    for (i, t) in suite.iter().enumerate() {
        let image = t.image.as_ref().ok_or(ScoreError::MissingImage(i))?;
        let outcome = match (&ast, &compile_error) {
            (Some(ast), _) => vpdsl::execute_checked(ast, image, backend, cfg.budget_secs)?,
            (None, Some(e)) => ExecutionOutcome::compile_error(e),
            (None, None) => unreachable!("parse yields an ast or an error"),
        };
        let score = score_test(&outcome, &t.expected, cfg);
        per_test.push(TestResult {
            caption: t.caption.clone(),
            expected: t.expected.clone(),
            image_id: image.id.clone(),
            outcome,
            score,
        });
    }
    let scores: Vec<f64> = per_test.iter().map(|r| r.score).collect();
    let aggregate = aggregate(&scores, cfg)?;
    Ok(ScoredProgram { source: source.clone(), compile_error, per_test, aggregate, ast })
}

/// Scores every program concurrently; output order follows `pool`.
pub fn score_pool(
    pool: &[ProgramSource],
    suite: &[UnitTest],
    backend: &dyn Perception,
    cfg: &ScoreConfig,
) -> Result<Vec<ScoredProgram>, ScoreError> {
    pool.par_iter().map(|p| score_program(p, suite, backend, cfg)).collect()
}

/// Position of the highest aggregate score; ties go to the lowest
/// generation index, then to the earlier position.
pub fn select_best(pool: &[ScoredProgram]) -> Result<usize, ScoreError> {
    let mut best: Option<usize> = None;
    for (i, p) in pool.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let q = &pool[b];
                p.aggregate > q.aggregate || (p.aggregate == q.aggregate && p.source.index < q.source.index)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best.ok_or(ScoreError::EmptyPool)
}

/// Baseline: execute every program on the target image and return the
/// modal normalized answer among successful runs. On a tie, or when every
/// run fails, the first program's outcome is returned.
pub fn most_common_answer(
    pool: &[ScoredProgram],
    image: &ImageHandle,
    backend: &dyn Perception,
    budget_secs: f64,
) -> Result<ExecutionOutcome, ScoreError> {
    if pool.is_empty() {
        return Err(ScoreError::EmptyPool);
    }
    let outcomes: Vec<ExecutionOutcome> =
        pool.iter().map(|p| p.execute(image, backend, budget_secs)).collect::<Result<_, _>>()?;
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for (i, o) in outcomes.iter().enumerate().filter(|(_, o)| o.is_answer()) {
        counts.entry(normalize_answer(o.answer_text())).or_insert((0, i)).0 += 1;
    }
    let top = counts.values().map(|(c, _)| *c).max().unwrap_or(0);
    let leaders: Vec<usize> = counts.values().filter(|(c, _)| *c == top).map(|(_, first)| *first).collect();
    let pick = match leaders.as_slice() {
        [only] => *only,
        _ => 0,
    };
    Ok(outcomes[pick].clone())
}
