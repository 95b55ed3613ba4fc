//! Per-record pipeline: programs, candidate tests, coverage sampling, image
//! synthesis, scoring and a selection policy. Records run in parallel under
//! a worker cap; results keep dataset order.

use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{CacheMode, CachedChat, CachedEmbedder, CachedImages, CachingTransport, ResponseCache};
use super::config::RunConfig;
use super::dataset::{load_image, Dataset, DatasetRecord};
use super::fixtures::{FixtureBundle, MockChat};
use super::manifest::{
    compute_metrics, Manifest, ManifestHeader, ManifestSummary, RecordResult, RepromptSummary, SuiteEntry,
};
use crate::imagegen::{
    parse_mock_caption, synthesize, HttpImageService, ImageService, LayoutPlan, SynthError, SynthServices,
    SynthStrategy, Synthesized,
};
use crate::llm::{ChatClient, HttpChatClient};
use crate::perception::{ImageHandle, Perception, RemoteBackend, SceneGraph, ScriptedBackend};
use crate::policies::{
    emit_reward_dataset, refuse_or_answer, run_reprompt_scored, select_scored, PolicyError, RepromptInputs,
    RewardExample, RewardInputs, RewardKind, RewardRecord,
};
use crate::progclient::{generate_programs, ProgClientError};
use crate::sampler::{sample_trace, Embedder, HashEmbedder, RemoteEmbedder, SampleError, SelectionTrace};
use crate::scoring::{score_pool, ScoreError, UnitTest};
use crate::testgen::{generate_candidates, CandidateTest, GenMode, TestgenError};
use crate::transport::{HttpTransport, RetryPolicy, ServiceClient};
use crate::vpdsl::ProgramSource;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Service(String),
}

impl PipelineError {
    /// Process exit code: 1 usage/config, 2 data, 3 service.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Service(_) => 3,
        }
    }
}

fn service(id: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Service(format!("record {id}: {e}"))
}

fn data(id: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(format!("record {id}: {e}"))
}

fn policy_error(id: &str, e: PolicyError) -> PipelineError {
    match e {
        PolicyError::Service(e) => service(id, e),
        PolicyError::Score(e @ ScoreError::Backend(_)) => service(id, e),
        other => data(id, other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Select,
    Refuse,
    Reprompt,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunMode {
    pub mock: bool,
    pub cache: CacheMode,
}

/// Candidate tests generated for one record.
#[derive(Debug, Clone, Serialize)]
pub struct TestsRecord {
    pub id: String,
    pub query: String,
    pub candidates: Vec<CandidateTest>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub id: String,
    pub query: String,
    pub candidates: usize,
    pub selected: Vec<CandidateTest>,
    pub trace: SelectionTrace,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthTest {
    pub caption: String,
    pub expected: String,
    pub image_id: String,
    pub seed: u64,
    pub nsfw_retries: u32,
    pub nsfw_flag: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneGraph>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutPlan>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthRecord {
    pub id: String,
    pub query: String,
    pub tests: Vec<SynthTest>,
}

/// Programs and the synthesized test suite of one record.
pub struct Prepared {
    pub programs: Vec<ProgramSource>,
    pub suite: Vec<UnitTest>,
    pub entries: Vec<SuiteEntry>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub mock: bool,
    llm: Box<dyn ChatClient>,
    embedder: Box<dyn Embedder>,
    images: Option<Box<dyn ImageService>>,
    backend: Box<dyn Perception>,
    cache: Arc<ResponseCache>,
}

impl Pipeline {
    pub fn from_config(mut cfg: RunConfig, mode: RunMode) -> Result<Self, PipelineError> {
        let cache = ResponseCache::new(cfg.cache_dir.clone(), mode.cache)
            .map_err(|e| PipelineError::Config(format!("cache: {e}")))?;
        let cache = Arc::new(cache);
        let hash = HashEmbedder::new(cfg.embed_dimension).map_err(|e| PipelineError::Config(e.to_string()))?;
        if mode.mock {
            cfg.synth.strategy = SynthStrategy::MockScene;
            let chat: Option<Box<dyn ChatClient>> = match &cfg.mock_fixtures {
                Some(p) => Some(Box::new(MockChat::new(FixtureBundle::load(p).map_err(PipelineError::Config)?))),
                None if mode.cache == CacheMode::Replay => None,
                None => return Err(PipelineError::Config("--mock needs mock_fixtures (or VPT_MOCK_FIXTURES)".into())),
            };
            let llm = Box::new(CachedChat { inner: chat, cache: cache.clone(), seed: cfg.seed });
            return Ok(Pipeline {
                llm,
                embedder: Box::new(hash),
                images: None,
                backend: Box::new(ScriptedBackend::new()),
                cache,
                mock: true,
                cfg,
            });
        }
        let timeout = Duration::from_secs_f64(cfg.chat.timeout_secs);
        let client = || ServiceClient::http(cfg.chat.max_in_flight, RetryPolicy::default(), timeout);
        let chat = cfg.chat.url.as_ref().map(|url| {
            Box::new(HttpChatClient::http(url, cfg.chat.api_key.as_deref(), cfg.chat.max_in_flight, timeout))
                as Box<dyn ChatClient>
        });
        let embedder: Box<dyn Embedder> = match &cfg.embed_url {
            Some(url) => Box::new(CachedEmbedder {
                inner: Box::new(RemoteEmbedder::new(url, cfg.embed_dimension, client())),
                cache: cache.clone(),
            }),
            None => Box::new(hash),
        };
        let g = &cfg.generate;
        let images = if g.plain.is_some() || g.hires.is_some() || g.grounded.is_some() {
            Some(Box::new(HttpImageService::new(g.clone(), client())) as Box<dyn ImageService>)
        } else {
            None
        };
        let images: Box<dyn ImageService> = Box::new(CachedImages { inner: images, cache: cache.clone() });
        let transport = CachingTransport { inner: HttpTransport::new(), cache: cache.clone() };
        let backend = RemoteBackend::with_transport(cfg.perception.clone(), Box::new(transport));
        Ok(Pipeline {
            llm: Box::new(CachedChat { inner: chat, cache: cache.clone(), seed: cfg.seed }),
            embedder,
            images: Some(images),
            backend: Box::new(backend),
            cache,
            mock: false,
            cfg,
        })
    }

    /// Pipeline over caller-supplied services, without a cache.
    pub fn with_services(
        cfg: RunConfig,
        llm: Box<dyn ChatClient>,
        embedder: Box<dyn Embedder>,
        images: Option<Box<dyn ImageService>>,
        backend: Box<dyn Perception>,
    ) -> Self {
        Pipeline { cfg, mock: false, llm, embedder, images, backend, cache: Arc::new(ResponseCache::disabled()) }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn image(&self, ds: &Dataset, rec: &DatasetRecord) -> Result<ImageHandle, PipelineError> {
        load_image(rec, &ds.base_dir).map_err(|e| PipelineError::Data(e.to_string()))
    }

    pub fn programs(&self, rec: &DatasetRecord) -> Result<Vec<ProgramSource>, PipelineError> {
        generate_programs(rec.task, &rec.query, self.cfg.programs, &*self.llm, &self.cfg.chat.sampling).map_err(|e| match e {
            ProgClientError::ZeroPrograms => PipelineError::Config(e.to_string()),
            other => service(&rec.id, other),
        })
    }

    /// Candidate tests; implementation-conditioned generation uses the
    /// first program. In mock mode captions outside the caption grammar are
    /// dropped before sampling.
    pub fn candidates(&self, rec: &DatasetRecord, programs: &[ProgramSource]) -> Result<Vec<CandidateTest>, PipelineError> {
        let spec = self.cfg.gen_spec(rec.task);
        let program = match spec.mode {
            GenMode::QueryOnly => None,
            GenMode::QueryPlusImplementation => programs.first(),
        };
        let mut tests =
            generate_candidates(&rec.query, program, &spec, &*self.llm, &self.cfg.chat.sampling).map_err(|e| match e {
                TestgenError::Service(_) | TestgenError::EmptyGeneration(_) => service(&rec.id, e),
                other => PipelineError::Config(other.to_string()),
            })?;
        if self.cfg.synth.strategy == SynthStrategy::MockScene {
            tests.retain(|t| match parse_mock_caption(&t.caption) {
                Ok(_) => true,
                Err(e) => {
                    log::warn!("record {}: skipping caption {:?}: {e}", rec.id, t.caption);
                    false
                }
            });
            if tests.is_empty() {
                return Err(data(&rec.id, "no generated caption fits the mock caption grammar"));
            }
        }
        Ok(tests)
    }

    pub fn select(
        &self,
        rec: &DatasetRecord,
        candidates: &[CandidateTest],
    ) -> Result<(Vec<CandidateTest>, SelectionTrace), PipelineError> {
        let trace = sample_trace(candidates, &self.cfg.sample_spec(), &*self.embedder).map_err(|e| match e {
            SampleError::Service(e) => service(&rec.id, e),
            other => data(&rec.id, other),
        })?;
        let picked = trace.indices().into_iter().map(|i| candidates[i].clone()).collect();
        Ok((picked, trace))
    }

    /// Images for the selected tests; captions that fail to synthesize are
    /// skipped with a warning.
    pub fn synthesize(
        &self,
        rec: &DatasetRecord,
        selected: &[CandidateTest],
    ) -> Result<Vec<(CandidateTest, Synthesized)>, PipelineError> {
        let services = SynthServices {
            images: self.images.as_deref(),
            llm: Some(&*self.llm),
            sampling: Some(&self.cfg.chat.sampling),
        };
        let mut out = Vec::new();
        for t in selected {
            match synthesize(&t.caption, &self.cfg.synth, services) {
                Ok(s) => out.push((t.clone(), s)),
                Err(SynthError::Grammar(e)) => log::warn!("record {}: skipping caption {:?}: {e}", rec.id, t.caption),
                Err(e @ SynthError::Missing(_)) => return Err(PipelineError::Config(e.to_string())),
                Err(e) => return Err(service(&rec.id, e)),
            }
        }
        if out.is_empty() {
            return Err(data(&rec.id, "no test image could be synthesized"));
        }
        Ok(out)
    }

    pub fn prepare(&self, rec: &DatasetRecord) -> Result<Prepared, PipelineError> {
        let programs = self.programs(rec)?;
        let candidates = self.candidates(rec, &programs)?;
        let (selected, _) = self.select(rec, &candidates)?;
        let synthesized = self.synthesize(rec, &selected)?;
        let entries = synthesized
            .iter()
            .map(|(t, s)| SuiteEntry {
                caption: t.caption.clone(),
                expected: t.expected.clone(),
                image_id: s.image.id.clone(),
                seed: s.seed,
                nsfw_retries: s.nsfw_retries,
            })
            .collect();
        let suite = synthesized.into_iter().map(|(t, s)| UnitTest::new(t.caption, t.expected, s.image)).collect();
        Ok(Prepared { programs, suite, entries })
    }

    pub fn run_record(&self, policy: Policy, ds: &Dataset, rec: &DatasetRecord) -> Result<RecordResult, PipelineError> {
        let image = self.image(ds, rec)?;
        let Prepared { programs, suite, entries } = self.prepare(rec)?;
        let backend = &*self.backend;
        let score = &self.cfg.score;
        let pool = score_pool(&programs, &suite, backend, score).map_err(|e| policy_error(&rec.id, e.into()))?;
        let (chosen, program_outcome, outcome, refusal, reprompt) = match policy {
            Policy::Select | Policy::Refuse => {
                let selection =
                    select_scored(pool.clone(), &image, backend, score).map_err(|e| policy_error(&rec.id, e))?;
                let chosen = selection.best().clone();
                let program_outcome = selection.outcome.clone();
                if policy == Policy::Select {
                    (chosen, program_outcome.clone(), program_outcome, None, None)
                } else {
                    let cfg = self.cfg.refusal.for_task(rec.task);
                    let r = refuse_or_answer(selection, &rec.query, &image, backend, &cfg)
                        .map_err(|e| policy_error(&rec.id, e))?;
                    (chosen, program_outcome, r.outcome, Some(r.decision), None)
                }
            }
            Policy::Reprompt => {
                let inputs = RepromptInputs {
                    task: rec.task,
                    query: &rec.query,
                    image: &image,
                    suite: &suite,
                    backend,
                    llm: &*self.llm,
                    sampling: &self.cfg.chat.sampling,
                    score,
                };
                let r = run_reprompt_scored(pool.clone(), &inputs, &self.cfg.reprompt)
                    .map_err(|e| policy_error(&rec.id, e))?;
                let summary = RepromptSummary { initial_best: r.initial_best, trace: r.trace };
                (r.best, r.outcome.clone(), r.outcome, None, Some(summary))
            }
        };
        Ok(RecordResult {
            id: rec.id.clone(),
            task: rec.task,
            query: rec.query.clone(),
            gold: rec.gold.clone(),
            image_id: image.id.clone(),
            tests: entries,
            pool,
            chosen,
            program_outcome,
            outcome,
            refusal,
            reprompt,
        })
    }

    /// Reward records for every generated program of one record.
    pub fn rewards(
        &self,
        ds: &Dataset,
        rec: &DatasetRecord,
    ) -> Result<Vec<Result<RewardRecord, PolicyError>>, PipelineError> {
        let image = self.image(ds, rec)?;
        let (programs, suite) = match self.cfg.reward.kind {
            RewardKind::UnitTest => {
                let p = self.prepare(rec)?;
                (p.programs, Some(p.suite))
            }
            RewardKind::Correctness => (self.programs(rec)?, None),
        };
        let examples =
            [RewardExample { id: rec.id.clone(), query: rec.query.clone(), image, gold: Some(rec.gold.clone()) }];
        let programs = [programs];
        let suites = suite.map(|s| [s]);
        let inputs = RewardInputs {
            examples: &examples,
            programs: &programs,
            suites: suites.as_ref().map(|s| &s[..]),
            backend: &*self.backend,
            score: &self.cfg.score,
        };
        let r = &self.cfg.reward;
        emit_reward_dataset(&inputs, r.kind, r.threshold, r.iteration).map_err(|e| policy_error(&rec.id, e))
    }

    pub fn tests_record(&self, rec: &DatasetRecord) -> Result<TestsRecord, PipelineError> {
        let programs = match self.cfg.gen_mode {
            GenMode::QueryOnly => Vec::new(),
            GenMode::QueryPlusImplementation => self.programs(rec)?,
        };
        let candidates = self.candidates(rec, &programs)?;
        Ok(TestsRecord { id: rec.id.clone(), query: rec.query.clone(), candidates })
    }

    pub fn sample_record(&self, rec: &DatasetRecord) -> Result<SampleRecord, PipelineError> {
        let t = self.tests_record(rec)?;
        let (selected, trace) = self.select(rec, &t.candidates)?;
        Ok(SampleRecord { id: t.id, query: t.query, candidates: t.candidates.len(), selected, trace })
    }

    pub fn synth_record(&self, rec: &DatasetRecord) -> Result<SynthRecord, PipelineError> {
        let s = self.sample_record(rec)?;
        let tests = self
            .synthesize(rec, &s.selected)?
            .into_iter()
            .map(|(t, img)| SynthTest {
                caption: t.caption,
                expected: t.expected,
                image_id: img.image.id.clone(),
                seed: img.seed,
                nsfw_retries: img.nsfw_retries,
                nsfw_flag: img.nsfw_flag,
                scene: img.image.scene().cloned(),
                layout: img.layout,
            })
            .collect();
        Ok(SynthRecord { id: s.id, query: s.query, tests })
    }

    /// Applies `f` to every record on at most `workers` threads. Output
    /// follows dataset order; the first failing record in that order wins.
    pub fn map_records<T: Send>(
        &self,
        ds: &Dataset,
        f: impl Fn(&DatasetRecord) -> Result<T, PipelineError> + Sync,
    ) -> Result<Vec<T>, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let results: Vec<Result<T, PipelineError>> = pool.install(|| ds.records.par_iter().map(&f).collect());
        results.into_iter().collect()
    }

    pub fn run(&self, policy: Policy, ds: &Dataset) -> Result<Vec<RecordResult>, PipelineError> {
        self.map_records(ds, |r| self.run_record(policy, ds, r))
    }

    pub fn manifest(
        &self,
        command: &str,
        dataset_sha256: &str,
        records: Vec<RecordResult>,
    ) -> Result<Manifest, PipelineError> {
        let metrics = compute_metrics(&records).map_err(|e| PipelineError::Data(e.to_string()))?;
        Ok(Manifest {
            header: ManifestHeader {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                dataset_sha256: dataset_sha256.to_string(),
                records: records.len(),
                seed: self.cfg.seed,
                mock: self.mock,
                config: self.cfg.clone(),
            },
            records,
            summary: ManifestSummary { metrics, response_hashes: self.cache.response_hashes() },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fixtures::QueryFixture;
    use crate::harness::dataset::ingest;

    const GOOD: &str = "def execute_command(image):\n    return bool_to_yesno(len(ImagePatch(image).find('cat')) > 0)\n";
    const ALWAYS_YES: &str = "def execute_command(image):\n    return 'yes'\n";
    const TESTS: &str = "1. Image Caption: \"a cat\" Answer: yes\n2. Image Caption: \"a dog\" Answer: no\n\
        3. Image Caption: \"two cats near a chair\" Answer: yes\n4. Image Caption: \"a red car\" Answer: no\n\
        5. Image Caption: \"a grey tabby cat peacefully napping\" Answer: yes";

    fn setup(dir: &std::path::Path) -> (RunConfig, Dataset) {
        std::fs::write(
            dir.join("s.json"),
            r#"{"width":100,"height":100,"objects":[{"name":"cat","box":[0,0,20,20]}],"qa_facts":{"Is there a cat?":"yes"}}"#,
        )
        .unwrap();
        let line = |id: &str| format!(r#"{{"id":"{id}","task":"vqa","query":"Is there a cat?","image":"s.json","gold":"yes"}}"#);
        std::fs::write(dir.join("d.jsonl"), [line("a"), line("b")].join("\n")).unwrap();
        let fixture = QueryFixture {
            programs: vec![ALWAYS_YES.into(), GOOD.into()],
            tests: vec![TESTS.into()],
            reprompt: vec![GOOD.into()],
        };
        let bundle = FixtureBundle { queries: [("Is there a cat?".to_string(), fixture)].into() };
        std::fs::write(dir.join("f.json"), serde_json::to_string(&bundle).unwrap()).unwrap();
        let cfg = RunConfig { mock_fixtures: Some(dir.join("f.json")), tests: 4, ..RunConfig::default() };
        (cfg, ingest(&dir.join("d.jsonl"), false).unwrap())
    }

    #[test]
    fn mock_select_and_refuse() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, ds) = setup(dir.path());
        let p = Pipeline::from_config(cfg, RunMode { mock: true, cache: CacheMode::Off }).unwrap();
        let out = p.run(Policy::Select, &ds).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].tests.len(), 4, "out-of-grammar caption dropped");
        assert_eq!(out[0].chosen.source.text, GOOD);
        assert_eq!(out[0].chosen.aggregate, 1.0);
        assert!(out[0].is_correct());
        let refuse = p.run(Policy::Refuse, &ds).unwrap();
        assert!(!refuse[0].refusal.as_ref().unwrap().refused);
        let m = p.manifest("run-select", "x", out).unwrap();
        assert_eq!(m.summary.metrics.accuracy, 1.0);
        assert!(!m.summary.response_hashes.is_empty());
    }

    #[test]
    fn mock_reprompt_and_rewards() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, ds) = setup(dir.path());
        cfg.programs = 1;
        let p = Pipeline::from_config(cfg, RunMode { mock: true, cache: CacheMode::Off }).unwrap();
        let out = p.run(Policy::Reprompt, &ds).unwrap();
        let summary = out[0].reprompt.as_ref().unwrap();
        assert_eq!(summary.initial_best, 0.5);
        assert_eq!(summary.trace.len(), 1);
        assert_eq!(out[0].chosen.aggregate, 1.0);
        let rewards = p.rewards(&ds, &ds.records[0]).unwrap();
        assert_eq!(rewards.len(), 1);
        assert_eq!(rewards[0].as_ref().unwrap().raw_reward, 0.5);
    }

    #[test]
    fn record_then_replay_offline() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, ds) = setup(dir.path());
        cfg.cache_dir = Some(dir.path().join("cache"));
        let rec = Pipeline::from_config(cfg.clone(), RunMode { mock: true, cache: CacheMode::ReadWrite }).unwrap();
        let a = rec.manifest("run-select", "x", rec.run(Policy::Select, &ds).unwrap()).unwrap();
        cfg.mock_fixtures = None;
        let replay = Pipeline::from_config(cfg.clone(), RunMode { mock: true, cache: CacheMode::Replay }).unwrap();
        let b = replay.manifest("run-select", "x", replay.run(Policy::Select, &ds).unwrap()).unwrap();
        assert_eq!(replay.cache().live_calls(), 0);
        assert_eq!(a.records.len(), b.records.len());
        assert_eq!(a.summary, b.summary);
        let body = |m: &Manifest| m.to_jsonl().lines().skip(1).map(str::to_string).collect::<Vec<_>>();
        assert_eq!(body(&a), body(&b));
        cfg.seed = 1;
        let other = Pipeline::from_config(cfg, RunMode { mock: true, cache: CacheMode::Replay }).unwrap();
        let err = other.run(Policy::Select, &ds).err().unwrap();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("chat/"));
    }

    #[test]
    fn mock_without_fixtures_is_config_error() {
        let err = Pipeline::from_config(RunConfig::default(), RunMode { mock: true, cache: CacheMode::Off }).err().unwrap();
        assert_eq!(err.exit_code(), 1);
    }
}
