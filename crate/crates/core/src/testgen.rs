//! Candidate unit-test generation: prompt a chat model for
//! `(image caption, expected answer)` pairs and parse them.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{ChatClient, ChatMessage, ChatRequest, Sampling};
use crate::templates::{self, Task, TestTemplate};
use crate::text::{answer_word_count, normalize_answer, normalize_key};
use crate::transport::ServiceError;
use crate::vpdsl::ProgramSource;

/// Answers with more words than this are dropped.
pub const MAX_ANSWER_WORDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateTest {
    pub caption: String,
    pub expected: String,
    pub source_sequence: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    QueryOnly,
    QueryPlusImplementation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub mode: GenMode,
    pub num_sequences: usize,
    pub template: TestTemplate,
    /// Overrides the client's default sampling temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl GenSpec {
    pub fn new(task: Task, mode: GenMode) -> Self {
        let template = match (mode, task) {
            (GenMode::QueryPlusImplementation, _) => TestTemplate::Implementation,
            (GenMode::QueryOnly, Task::Vqa) => TestTemplate::Vqa,
            (GenMode::QueryOnly, Task::Itm) => TestTemplate::Itm,
        };
        GenSpec { mode, num_sequences: 3, template, temperature: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TestgenError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("no parsable test in any of {0} generated sequences")]
    EmptyGeneration(usize),
    #[error("implementation-conditioned generation needs a program")]
    MissingProgram,
    #[error("num_sequences must be at least 1")]
    NoSequences,
}

fn line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"^\s*(?:\d+\.\s*)?(?:Image Caption:\s*)+"([^"]*)"\s*Answer:\s*(.+?)\s*$"#).unwrap()
    })
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

/// Extracts every `Image Caption: "…" Answer: …` line. Non-matching lines
/// are ignored; the result carries `source_sequence` 0.
pub fn parse_test_lines(raw: &str) -> Vec<CandidateTest> {
    raw.lines()
        .filter_map(|line| {
            let caps = line_re().captures(line)?;
            let caption = caps[1].trim();
            let expected = strip_quotes(&caps[2]);
            if caption.is_empty() || expected.is_empty() {
                return None;
            }
            Some(CandidateTest { caption: caption.to_string(), expected: expected.to_string(), source_sequence: 0 })
        })
        .collect()
}

/// Concatenates parses of several sequences, dropping duplicates on the
/// normalized `(caption, answer)` pair and answers longer than
/// [`MAX_ANSWER_WORDS`]. First-seen order is kept.
pub fn merge_sequences<S: AsRef<str>>(sequences: &[S]) -> Vec<CandidateTest> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        for mut t in parse_test_lines(seq.as_ref()) {
            if answer_word_count(&t.expected) > MAX_ANSWER_WORDS {
                continue;
            }
            if seen.insert((normalize_key(&t.caption), normalize_answer(&t.expected))) {
                t.source_sequence = i;
                out.push(t);
            }
        }
    }
    out
}

pub fn render_prompt(query: &str, program: Option<&ProgramSource>, spec: &GenSpec) -> Result<String, TestgenError> {
    let program = match spec.mode {
        GenMode::QueryOnly => None,
        GenMode::QueryPlusImplementation => Some(program.ok_or(TestgenError::MissingProgram)?.text.as_str()),
    };
    Ok(templates::render_testgen_prompt(spec.template, query, program))
}

pub fn generate_candidates(
    query: &str,
    program: Option<&ProgramSource>,
    spec: &GenSpec,
    llm: &dyn ChatClient,
    sampling: &Sampling,
) -> Result<Vec<CandidateTest>, TestgenError> {
    if spec.num_sequences == 0 {
        return Err(TestgenError::NoSequences);
    }
    let prompt = render_prompt(query, program, spec)?;
    let mut sampling = sampling.clone();
    if let Some(t) = spec.temperature {
        sampling.temperature = t;
    }
    let messages = vec![ChatMessage::system(templates::TESTGEN_SYSTEM_PROMPT), ChatMessage::user(prompt)];
    let sequences = llm.complete(&ChatRequest::new(messages, spec.num_sequences, &sampling))?;
    let tests = merge_sequences(&sequences);
    if tests.is_empty() {
        return Err(TestgenError::EmptyGeneration(sequences.len()));
    }
    log::debug!("{} candidate tests from {} sequences for {query:?}", tests.len(), sequences.len());
    Ok(tests)
}
