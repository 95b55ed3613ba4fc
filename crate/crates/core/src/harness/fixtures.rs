//! Offline chat model answering from a per-query fixture bundle.
//!
//! ```json
//! {"queries": {"Is there a cat?": {
//!     "programs": ["def execute_command(image): ..."],
//!     "tests": ["1. Image Caption: \"a cat\" Answer: yes\n..."],
//!     "reprompt": ["def execute_command(image): ..."]}}}
//! ```
//!
//! The prompt kind is read from its last line and the query from its last
//! `Query: ` line. A request for `n` samples gets the first `n` entries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::llm::{ChatClient, ChatRequest};
use crate::text::normalize_key;
use crate::transport::ServiceError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryFixture {
    pub programs: Vec<String>,
    /// Raw generated test sequences.
    pub tests: Vec<String>,
    pub reprompt: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureBundle {
    pub queries: BTreeMap<String, QueryFixture>,
}

impl FixtureBundle {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid fixture bundle {}: {e}", path.display()))
    }

    fn get(&self, query: &str) -> Option<&QueryFixture> {
        self.queries.get(query).or_else(|| {
            let key = normalize_key(query);
            self.queries.iter().find(|(q, _)| normalize_key(q) == key).map(|(_, f)| f)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Programs,
    Tests,
    Reprompt,
    Layout,
}

pub fn prompt_kind(prompt: &str) -> Option<PromptKind> {
    let last = prompt.trim_end().lines().last()?.trim();
    match last {
        "Corrected Program:" => Some(PromptKind::Reprompt),
        "Tests:" => Some(PromptKind::Tests),
        "Program:" => Some(PromptKind::Programs),
        "Objects:" => Some(PromptKind::Layout),
        _ => None,
    }
}

pub fn prompt_query(prompt: &str) -> Option<&str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix("Query: ")).map(str::trim)
}

pub struct MockChat {
    bundle: FixtureBundle,
}

impl MockChat {
    pub fn new(bundle: FixtureBundle) -> Self {
        MockChat { bundle }
    }
}

impl ChatClient for MockChat {
    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>, ServiceError> {
        let prompt = request.prompt();
        let bad = |m: String| ServiceError::malformed("mock chat", m);
        let kind = prompt_kind(prompt).ok_or_else(|| bad("unrecognized prompt".into()))?;
        let query = prompt_query(prompt).ok_or_else(|| bad("prompt has no query".into()))?;
        let fixture = self.bundle.get(query).ok_or_else(|| bad(format!("no fixture for query {query:?}")))?;
        let pool = match kind {
            PromptKind::Programs => &fixture.programs,
            PromptKind::Tests => &fixture.tests,
            PromptKind::Reprompt => &fixture.reprompt,
            PromptKind::Layout => return Err(bad("layout prompts have no fixtures".into())),
        };
        Ok(pool.iter().take(request.n).cloned().collect())
    }
}
