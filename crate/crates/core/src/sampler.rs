//! Coverage sampling: pick K tests from a candidate pool by answer coverage,
//! then caption diversity in embedding space.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::testgen::CandidateTest;
use crate::text::normalize_answer;
use crate::transport::{RetryPolicy, ServiceClient, ServiceError, Transport};

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ServiceError>;
}

/// Signed feature hashing of lowercase alphanumeric tokens, L2-normalized.
/// Deterministic across platforms since buckets come from SHA-256.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub const MIN_DIMENSION: usize = 8;

    pub fn new(dimension: usize) -> Result<Self, SampleError> {
        if dimension < Self::MIN_DIMENSION {
            return Err(SampleError::Dimension(dimension));
        }
        Ok(HashEmbedder { dimension })
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let lowered = text.to_lowercase();
        for token in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let digest = Sha256::digest(token.as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dimension as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ServiceError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for `POST /embed {texts} -> {vectors}`.
pub struct RemoteEmbedder {
    url: String,
    dimension: usize,
    client: ServiceClient,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dimension: usize, client: ServiceClient) -> Self {
        RemoteEmbedder { url: url.into(), dimension, client }
    }

    pub fn with_transport(url: impl Into<String>, dimension: usize, transport: Box<dyn Transport>) -> Self {
        Self::new(url, dimension, ServiceClient::new(transport, 4, RetryPolicy::none(), Duration::from_secs(60)))
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ServiceError> {
        let resp = self.client.post(&self.url, &json!({ "texts": texts }))?;
        let vectors = resp
            .get("vectors")
            .and_then(Value::as_array)
            .ok_or_else(|| ServiceError::malformed("embed", "missing vectors"))?;
        let out: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                v.as_array()
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                    .filter(|xs| xs.len() == self.dimension)
                    .ok_or_else(|| ServiceError::malformed("embed", "vector of wrong shape"))
            })
            .collect::<Result<_, _>>()?;
        if out.len() != texts.len() {
            return Err(ServiceError::malformed("embed", format!("{} vectors for {} texts", out.len(), texts.len())));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ByAnswer,
    ByInput,
    AnswerThenInput,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "by_answer" => Ok(Strategy::ByAnswer),
            "by_input" => Ok(Strategy::ByInput),
            "answer_then_input" => Ok(Strategy::AnswerThenInput),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

/// How a remaining candidate's distance to the selected set is summarized
/// during greedy growth. `MaxMax` is the default; `MaxMin` is classical
/// farthest-point sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    MaxMax,
    MaxMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub k: usize,
    pub strategy: Strategy,
    #[serde(default)]
    pub criterion: Criterion,
}

impl SampleSpec {
    pub fn new(k: usize, strategy: Strategy) -> Self {
        SampleSpec { k, strategy, criterion: Criterion::MaxMax }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("need at least two items, got {0}")]
    TooFewItems(usize),
    #[error("hash embedder dimension must be at least 8, got {0}")]
    Dimension(usize),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pick {
    /// Pool smaller than k.
    All,
    /// First candidate bearing a new answer.
    Answer,
    /// Seed of input-only sampling.
    Seed,
    /// Greedy diversity step.
    Diversity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub index: usize,
    pub pick: Pick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
}

/// Selected candidate indices in selection order, with the reason for each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub steps: Vec<SelectionStep>,
}

impl SelectionTrace {
    pub fn indices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.index).collect()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn captions(items: &[CandidateTest]) -> Vec<String> {
    items.iter().map(|c| c.caption.clone()).collect()
}

/// Maximum pairwise Euclidean distance between encoded captions.
pub fn input_diversity_score(selected: &[CandidateTest], embedder: &dyn Embedder) -> Result<f64, SampleError> {
    if selected.len() < 2 {
        return Err(SampleError::TooFewItems(selected.len()));
    }
    Ok(max_pairwise(&embedder.embed(&captions(selected))?))
}

pub fn max_pairwise(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.max(euclidean(&points[i], &points[j]));
        }
    }
    best
}

/// Selection over precomputed embeddings; `answers` must be normalized.
pub fn select_indices(answers: &[String], embeddings: &[Vec<f64>], spec: &SampleSpec) -> SelectionTrace {
    let n = answers.len();
    let mut trace = SelectionTrace::default();
    if n <= spec.k {
        trace.steps = (0..n).map(|index| SelectionStep { index, pick: Pick::All, distance: None }).collect();
        return trace;
    }
    let mut chosen = vec![false; n];
    match spec.strategy {
        Strategy::ByAnswer | Strategy::AnswerThenInput => {
            let mut seen = HashSet::new();
            for (i, a) in answers.iter().enumerate() {
                if trace.steps.len() == spec.k {
                    break;
                }
                if seen.insert(a.as_str()) {
                    chosen[i] = true;
                    trace.steps.push(SelectionStep { index: i, pick: Pick::Answer, distance: None });
                }
            }
        }
        Strategy::ByInput => {
            chosen[0] = true;
            trace.steps.push(SelectionStep { index: 0, pick: Pick::Seed, distance: None });
        }
    }
    while trace.steps.len() < spec.k {
        let mut best: Option<(usize, f64)> = None;
        for r in (0..n).filter(|&r| !chosen[r]) {
            let dists = trace.steps.iter().map(|s| euclidean(&embeddings[r], &embeddings[s.index]));
            let d = match spec.criterion {
                Criterion::MaxMax => dists.fold(f64::NEG_INFINITY, f64::max),
                Criterion::MaxMin => dists.fold(f64::INFINITY, f64::min),
            };
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((r, d));
            }
        }
        let Some((index, d)) = best else { break };
        chosen[index] = true;
        trace.steps.push(SelectionStep { index, pick: Pick::Diversity, distance: Some(d) });
    }
    trace
}

/// Runs the full selection, embedding captions only when the greedy
/// diversity phase is needed.
pub fn sample_trace(
    candidates: &[CandidateTest],
    spec: &SampleSpec,
    embedder: &dyn Embedder,
) -> Result<SelectionTrace, SampleError> {
    if candidates.is_empty() {
        return Err(SampleError::EmptyPool);
    }
    if spec.k == 0 {
        return Err(SampleError::ZeroK);
    }
    let answers: Vec<String> = candidates.iter().map(|c| normalize_answer(&c.expected)).collect();
    let distinct = answers.iter().collect::<HashSet<_>>().len();
    let needs_embeddings = candidates.len() > spec.k && (spec.strategy == Strategy::ByInput || distinct < spec.k);
    let embeddings = if needs_embeddings { embedder.embed(&captions(candidates))? } else { Vec::new() };
    if needs_embeddings && embeddings.len() != candidates.len() {
        return Err(ServiceError::malformed("embed", "vector count mismatch").into());
    }
    Ok(select_indices(&answers, &embeddings, spec))
}

pub fn sample(
    candidates: &[CandidateTest],
    spec: &SampleSpec,
    embedder: &dyn Embedder,
) -> Result<Vec<CandidateTest>, SampleError> {
    let trace = sample_trace(candidates, spec, embedder)?;
    Ok(trace.indices().into_iter().map(|i| candidates[i].clone()).collect())
}
