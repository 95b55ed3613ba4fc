//! Run manifests (JSONL: header, one line per record, summary) and the
//! metrics recomputed from them.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::policies::{refusal_f1, RefusalDecision, RepromptIteration};
use crate::scoring::ScoredProgram;
use crate::templates::Task;
use crate::text::normalize_answer;
use crate::vpdsl::ExecutionOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub caption: String,
    pub expected: String,
    pub image_id: String,
    pub seed: u64,
    pub nsfw_retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepromptSummary {
    pub initial_best: f64,
    pub trace: Vec<RepromptIteration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub task: Task,
    pub query: String,
    pub gold: String,
    pub image_id: String,
    pub tests: Vec<SuiteEntry>,
    pub pool: Vec<ScoredProgram>,
    pub chosen: ScoredProgram,
    /// The chosen program run on the record's image.
    pub program_outcome: ExecutionOutcome,
    /// Final answer after any fallback.
    pub outcome: ExecutionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal: Option<RefusalDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reprompt: Option<RepromptSummary>,
}

fn matches_gold(outcome: &ExecutionOutcome, gold: &str) -> bool {
    outcome.is_answer() && normalize_answer(outcome.answer_text()) == normalize_answer(gold)
}

impl RecordResult {
    pub fn is_correct(&self) -> bool {
        matches_gold(&self.outcome, &self.gold)
    }

    pub fn program_correct(&self) -> bool {
        matches_gold(&self.program_outcome, &self.gold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no results to compute metrics over")]
pub struct EmptyResults;

/// Fraction of records whose final answer matches the gold answer after
/// normalization. Error outcomes count as incorrect.
pub fn accuracy(results: &[RecordResult]) -> Result<f64, EmptyResults> {
    fraction(results, RecordResult::is_correct)
}

/// Fraction of records whose chosen program failed on the record's image.
pub fn error_rate(results: &[RecordResult]) -> Result<f64, EmptyResults> {
    fraction(results, |r| !r.program_outcome.is_answer())
}

fn fraction(results: &[RecordResult], pred: impl Fn(&RecordResult) -> bool) -> Result<f64, EmptyResults> {
    if results.is_empty() {
        return Err(EmptyResults);
    }
    Ok(results.iter().filter(|r| pred(r)).count() as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: usize,
    pub accuracy: f64,
    pub error_rate: f64,
    pub program_accuracy: f64,
    pub mean_best_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_rate: Option<f64>,
    /// Refusals scored against records whose program answer was wrong.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reprompt_improved: Option<usize>,
}

pub fn compute_metrics(results: &[RecordResult]) -> Result<Metrics, EmptyResults> {
    let n = results.len() as f64;
    let decisions: Vec<(bool, bool)> =
        results.iter().filter_map(|r| r.refusal.as_ref().map(|d| (d.refused, !r.program_correct()))).collect();
    let reprompts: Vec<&RepromptSummary> = results.iter().filter_map(|r| r.reprompt.as_ref()).collect();
    Ok(Metrics {
        records: results.len(),
        accuracy: accuracy(results)?,
        error_rate: error_rate(results)?,
        program_accuracy: fraction(results, RecordResult::program_correct)?,
        mean_best_score: results.iter().map(|r| r.chosen.aggregate).sum::<f64>() / n,
        refusal_rate: (!decisions.is_empty())
            .then(|| decisions.iter().filter(|d| d.0).count() as f64 / decisions.len() as f64),
        refusal_f1: (!decisions.is_empty()).then(|| refusal_f1(&decisions)),
        reprompt_improved: (!reprompts.is_empty()).then(|| {
            results
                .iter()
                .filter_map(|r| r.reprompt.as_ref().map(|s| (s, r.chosen.aggregate)))
                .filter(|(s, best)| *best > s.initial_best)
                .count()
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub command: String,
    pub version: String,
    pub dataset_sha256: String,
    pub records: usize,
    pub seed: u64,
    pub mock: bool,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub metrics: Metrics,
    /// `kind:key:sha256` of every service response the run consumed.
    pub response_hashes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManifestLine {
    Header(Box<ManifestHeader>),
    Record(Box<RecordResult>),
    Summary(ManifestSummary),
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<RecordResult>,
    pub summary: ManifestSummary,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("manifest is missing its {0} line")]
    Missing(&'static str),
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: &ManifestLine| {
            out.push_str(&serde_json::to_string(l).expect("manifest lines serialize"));
            out.push('\n');
        };
        push(&ManifestLine::Header(Box::new(self.header.clone())));
        for r in &self.records {
            push(&ManifestLine::Record(Box::new(r.clone())));
        }
        push(&ManifestLine::Summary(self.summary.clone()));
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let (mut header, mut summary, mut records) = (None, None, Vec::new());
        for (i, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line = serde_json::from_str::<ManifestLine>(raw)
                .map_err(|e| ManifestError::Line { line: i + 1, message: e.to_string() })?;
            match line {
                ManifestLine::Header(h) => header = Some(*h),
                ManifestLine::Record(r) => records.push(*r),
                ManifestLine::Summary(s) => summary = Some(s),
            }
        }
        Ok(Manifest {
            header: header.ok_or(ManifestError::Missing("header"))?,
            records,
            summary: summary.ok_or(ManifestError::Missing("summary"))?,
        })
    }
}
