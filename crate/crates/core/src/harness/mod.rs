//! Operational shell around the pipeline: configuration, dataset ingest,
//! response caching with record/replay, run manifests and metrics.

pub mod cache;
pub mod config;
pub mod dataset;
pub mod fixtures;
pub mod manifest;
pub mod pipeline;

pub use cache::{cache_key, canonical_json, CacheMode, ResponseCache};
pub use config::{ConfigError, RunConfig};
pub use dataset::{ingest, load_image, Dataset, DatasetRecord, FormatError};
pub use fixtures::{FixtureBundle, MockChat, QueryFixture};
pub use manifest::{accuracy, compute_metrics, error_rate, EmptyResults, Manifest, Metrics, RecordResult};
pub use pipeline::{Pipeline, PipelineError, Policy, RunMode};
