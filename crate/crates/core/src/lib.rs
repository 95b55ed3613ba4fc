//! Visual unit testing for LLM-generated visual programs.
//!
//! A restricted Python-like DSL is interpreted against pluggable perception
//! backends. Candidate programs are scored on synthesized unit tests, and
//! the scores drive best-program selection, answer refusal, re-prompting
//! and reward emission.

pub mod harness;
pub mod imagegen;
pub mod llm;
pub mod perception;
pub mod policies;
pub mod progclient;
pub mod sampler;
pub mod scoring;
pub mod templates;
pub mod testgen;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
pub mod text;
pub mod transport;
pub mod vpdsl;

pub use harness::{DatasetRecord, Manifest, RecordResult, RunConfig};
pub use imagegen::{SynthSpec, SynthStrategy};
pub use llm::{ChatClient, Sampling, ScriptedChat};
pub use perception::{BBox, ImageHandle, Perception, SceneGraph, SceneObject, ScriptedBackend};
pub use policies::{RefusalConfig, RepromptConfig, RewardRecord};
pub use sampler::{Criterion, Embedder, HashEmbedder, SampleSpec, Strategy};
pub use scoring::{Aggregator, ScoreConfig, ScoredProgram, UnitTest};
pub use templates::Task;
pub use testgen::CandidateTest;
pub use transport::ServiceError;
pub use vpdsl::{CompileError, ExecutionOutcome, OutcomeKind, ProgramSource};
