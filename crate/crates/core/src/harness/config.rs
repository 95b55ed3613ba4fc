//! Run configuration: a JSON file plus environment overrides for endpoints
//! and secrets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::imagegen::{GenerateEndpoints, SynthSpec};
use crate::llm::Sampling;
use crate::perception::BackendConfig;
use crate::policies::{Fallback, RefusalConfig, RepromptConfig, RewardKind};
use crate::sampler::{Criterion, SampleSpec, Strategy};
use crate::scoring::ScoreConfig;
use crate::templates::Task;
use crate::testgen::{GenMode, GenSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSettings {
    pub url: Option<String>,
    /// Never serialized, so it stays out of manifests.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub sampling: Sampling,
    pub max_in_flight: usize,
    pub timeout_secs: f64,
}

impl Default for ChatSettings {
    fn default() -> Self {
        ChatSettings { url: None, api_key: None, sampling: Sampling::default(), max_in_flight: 4, timeout_secs: 120.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefusalSettings {
    pub threshold: f64,
    /// Fixed fallback; by default VQA records ask the VQA model and ITM
    /// records threshold the image-text score.
    pub fallback: Option<Fallback>,
    pub itm_threshold: f64,
}

impl Default for RefusalSettings {
    fn default() -> Self {
        let d = RefusalConfig::default();
        RefusalSettings { threshold: d.threshold, fallback: None, itm_threshold: d.itm_threshold }
    }
}

impl RefusalSettings {
    pub fn for_task(&self, task: Task) -> RefusalConfig {
        RefusalConfig {
            threshold: self.threshold,
            fallback: self.fallback.unwrap_or(Fallback::for_task(task)),
            itm_threshold: self.itm_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSettings {
    pub kind: RewardKind,
    pub threshold: f64,
    pub iteration: usize,
}

impl Default for RewardSettings {
    fn default() -> Self {
        RewardSettings { kind: RewardKind::UnitTest, threshold: 0.8, iteration: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    /// Candidate programs per query.
    pub programs: usize,
    /// Unit tests kept per query.
    pub tests: usize,
    pub test_sequences: usize,
    pub gen_mode: GenMode,
    pub strategy: Strategy,
    pub criterion: Criterion,
    pub embed_dimension: usize,
    pub synth: SynthSpec,
    pub score: ScoreConfig,
    pub refusal: RefusalSettings,
    pub reprompt: RepromptConfig,
    pub reward: RewardSettings,
    pub chat: ChatSettings,
    pub embed_url: Option<String>,
    pub generate: GenerateEndpoints,
    pub perception: BackendConfig,
    pub cache_dir: Option<PathBuf>,
    pub mock_fixtures: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 4,
            programs: 5,
            tests: 5,
            test_sequences: 3,
            gen_mode: GenMode::QueryOnly,
            strategy: Strategy::AnswerThenInput,
            criterion: Criterion::default(),
            embed_dimension: 64,
            synth: SynthSpec::default(),
            score: ScoreConfig::default(),
            refusal: RefusalSettings::default(),
            reprompt: RepromptConfig::default(),
            reward: RewardSettings::default(),
            chat: ChatSettings::default(),
            embed_url: None,
            generate: GenerateEndpoints::default(),
            perception: BackendConfig::default(),
            cache_dir: None,
            mock_fixtures: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid config {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub const ENV_OVERRIDES: [&str; 10] = [
    "VPT_CHAT_URL",
    "VPT_CHAT_MODEL",
    "VPT_API_KEY",
    "VPT_EMBED_URL",
    "VPT_GENERATE_URL",
    "VPT_DETECT_URL",
    "VPT_VQA_URL",
    "VPT_ITM_URL",
    "VPT_CACHE_DIR",
    "VPT_MOCK_FIXTURES",
];

impl RunConfig {
    /// Defaults, overlaid with the file at `path` if given, then with the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Io { path: p.to_path_buf(), message: e.to_string() })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Json { path: p.to_path_buf(), message: e.to_string() })?
            }
            None => RunConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok().filter(|v| !v.is_empty()));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for name in ENV_OVERRIDES {
            let Some(v) = lookup(name) else { continue };
            match name {
                "VPT_CHAT_URL" => self.chat.url = Some(v),
                "VPT_CHAT_MODEL" => self.chat.sampling.model = v,
                "VPT_API_KEY" => self.chat.api_key = Some(v),
                "VPT_EMBED_URL" => self.embed_url = Some(v),
                "VPT_GENERATE_URL" => self.generate.plain = Some(v),
                "VPT_DETECT_URL" => self.perception.endpoints.detect = Some(v),
                "VPT_VQA_URL" => self.perception.endpoints.vqa = Some(v),
                "VPT_ITM_URL" => self.perception.endpoints.itm = Some(v),
                "VPT_CACHE_DIR" => self.cache_dir = Some(v.into()),
                "VPT_MOCK_FIXTURES" => self.mock_fixtures = Some(v.into()),
                _ => unreachable!(),
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.programs == 0 {
            return bad("programs must be at least 1".into());
        }
        if self.tests == 0 {
            return bad("tests must be at least 1".into());
        }
        if self.test_sequences == 0 {
            return bad("test_sequences must be at least 1".into());
        }
        if self.embed_dimension < 8 {
            return bad(format!("embed_dimension must be at least 8, got {}", self.embed_dimension));
        }
        if self.reprompt.programs_per_round == 0 {
            return bad("reprompt.programs_per_round must be at least 1".into());
        }
        for (name, v) in [
            ("refusal.threshold", self.refusal.threshold),
            ("reprompt.threshold", self.reprompt.threshold),
            ("reward.threshold", self.reward.threshold),
            ("score.budget_secs", self.score.budget_secs),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        self.perception.validate().map_err(ConfigError::Invalid)
    }

    pub fn gen_spec(&self, task: Task) -> GenSpec {
        let mut spec = GenSpec::new(task, self.gen_mode);
        spec.num_sequences = self.test_sequences;
        spec
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec { k: self.tests, strategy: self.strategy, criterion: self.criterion }
    }
}
