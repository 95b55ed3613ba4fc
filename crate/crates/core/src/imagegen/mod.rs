//! Turns test captions into images: text-to-image services (optionally
//! layout-grounded) or, offline, scene graphs compiled from a controlled
//! caption grammar.

mod layout;
mod mock;

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

pub use layout::{parse_layout, plan_layout, LayoutError, LayoutObject, LayoutPlan, DEFAULT_BACKGROUND, LAYOUT_SEQUENCES};
pub use mock::{
    absence_labels, compile_mock_scene, compile_parsed, parse_mock_caption, Absence, Clause, GrammarError, MockCaption,
    Relation, NEAR_GAP,
};

use crate::llm::{ChatClient, Sampling};
use crate::perception::ImageHandle;
use crate::transport::{RetryPolicy, ServiceClient, ServiceError, Transport};

/// Side of the square images produced by every strategy.
pub const IMAGE_SIZE: i64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthStrategy {
    PlainDiffusion,
    HiresDiffusion,
    LmGrounded,
    MockScene,
}

impl std::str::FromStr for SynthStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain_diffusion" => Ok(SynthStrategy::PlainDiffusion),
            "hires_diffusion" => Ok(SynthStrategy::HiresDiffusion),
            "lm_grounded" => Ok(SynthStrategy::LmGrounded),
            "mock_scene" => Ok(SynthStrategy::MockScene),
            other => Err(format!("unknown synthesis strategy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub strategy: SynthStrategy,
    pub seed: u64,
    pub guidance: f64,
    pub steps: u32,
    pub nsfw_retries: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { strategy: SynthStrategy::MockScene, seed: 0, guidance: 16.0, steps: 50, nsfw_retries: 10 }
    }
}

/// Wire shape of `POST /generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
    pub guidance: f64,
    pub steps: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_b64: String,
    pub nsfw_flag: bool,
}

pub trait ImageService: Send + Sync {
    fn generate(&self, strategy: SynthStrategy, request: &GenerateRequest) -> Result<GenerateResponse, ServiceError>;
}

/// Generation endpoint per diffusion strategy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateEndpoints {
    pub plain: Option<String>,
    pub hires: Option<String>,
    pub grounded: Option<String>,
}

impl GenerateEndpoints {
    pub fn url(&self, strategy: SynthStrategy) -> Option<&str> {
        match strategy {
            SynthStrategy::PlainDiffusion => self.plain.as_deref(),
            SynthStrategy::HiresDiffusion => self.hires.as_deref(),
            SynthStrategy::LmGrounded => self.grounded.as_deref().or(self.plain.as_deref()),
            SynthStrategy::MockScene => None,
        }
    }
}

pub struct HttpImageService {
    endpoints: GenerateEndpoints,
    client: ServiceClient,
}

impl HttpImageService {
    pub fn new(endpoints: GenerateEndpoints, client: ServiceClient) -> Self {
        HttpImageService { endpoints, client }
    }

    pub fn with_transport(endpoints: GenerateEndpoints, transport: Box<dyn Transport>) -> Self {
        Self::new(endpoints, ServiceClient::new(transport, 4, RetryPolicy::none(), Duration::from_secs(60)))
    }
}

impl ImageService for HttpImageService {
    fn generate(&self, strategy: SynthStrategy, request: &GenerateRequest) -> Result<GenerateResponse, ServiceError> {
        let url = self
            .endpoints
            .url(strategy)
            .ok_or_else(|| ServiceError::NotConfigured(format!("generate ({strategy:?})")))?;
        let body = serde_json::to_value(request).expect("generate requests serialize");
        let resp = self.client.post(url, &body)?;
        serde_json::from_value(resp).map_err(|e| ServiceError::malformed("generate", e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("caption outside the mock grammar: {0}")]
    Grammar(#[from] GrammarError),
    #[error("{0} is required for this synthesis strategy")]
    Missing(&'static str),
    #[error("generated image is not valid base64: {0}")]
    Decode(String),
}

/// Services a synthesis strategy may need.
#[derive(Clone, Copy, Default)]
pub struct SynthServices<'a> {
    pub images: Option<&'a dyn ImageService>,
    pub llm: Option<&'a dyn ChatClient>,
    pub sampling: Option<&'a Sampling>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Synthesized {
    pub image: ImageHandle,
    /// Seed of the returned image.
    pub seed: u64,
    pub nsfw_retries: u32,
    /// Set when the returned image is still flagged after the retry budget.
    pub nsfw_flag: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutPlan>,
}

/// Produces the image for one caption. An NSFW-flagged result is retried
/// with the seed incremented by one, at most `nsfw_retries` times; the last
/// image is returned either way.
pub fn synthesize(caption: &str, spec: &SynthSpec, services: SynthServices<'_>) -> Result<Synthesized, SynthError> {
    if spec.strategy == SynthStrategy::MockScene {
        let scene = compile_mock_scene(caption)?;
        return Ok(Synthesized {
            image: ImageHandle::from_scene(scene),
            seed: spec.seed,
            nsfw_retries: 0,
            nsfw_flag: false,
            layout: None,
        });
    }
    let images = services.images.ok_or(SynthError::Missing("an image generation service"))?;
    let layout = match spec.strategy {
        SynthStrategy::LmGrounded => {
            let llm = services.llm.ok_or(SynthError::Missing("a chat service"))?;
            let default = Sampling::default();
            Some(plan_layout(caption, llm, services.sampling.unwrap_or(&default))?)
        }
        _ => None,
    };
    let mut request =
        GenerateRequest { prompt: caption.to_string(), seed: spec.seed, guidance: spec.guidance, steps: spec.steps, layout };
    let mut retries = 0;
    let resp = loop {
        let resp = images.generate(spec.strategy, &request)?;
        if !resp.nsfw_flag || retries >= spec.nsfw_retries {
            break resp;
        }
        log::info!("nsfw flag on seed {}; retrying with seed {}", request.seed, request.seed.wrapping_add(1));
        request.seed = request.seed.wrapping_add(1);
        retries += 1;
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(resp.image_b64.as_bytes())
        .map_err(|e| SynthError::Decode(e.to_string()))?;
    Ok(Synthesized {
        image: ImageHandle::from_bytes(bytes, IMAGE_SIZE, IMAGE_SIZE),
        seed: request.seed,
        nsfw_retries: retries,
        nsfw_flag: resp.nsfw_flag,
        layout: request.layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedChat;
    use std::sync::Mutex;

    /// Flags the seeds in `flagged`; image bytes are the seed number.
    struct FakeDiffusion {
        flagged: Vec<u64>,
        seen: Mutex<Vec<GenerateRequest>>,
    }

    impl ImageService for FakeDiffusion {
        fn generate(&self, _: SynthStrategy, r: &GenerateRequest) -> Result<GenerateResponse, ServiceError> {
            self.seen.lock().unwrap().push(r.clone());
            Ok(GenerateResponse {
                image_b64: base64::engine::general_purpose::STANDARD.encode(r.seed.to_string()),
                nsfw_flag: self.flagged.contains(&r.seed),
            })
        }
    }

    fn fake(flagged: &[u64]) -> FakeDiffusion {
        FakeDiffusion { flagged: flagged.to_vec(), seen: Mutex::new(Vec::new()) }
    }

    fn run(svc: &FakeDiffusion, seed: u64, retries: u32) -> Synthesized {
        let spec = SynthSpec { strategy: SynthStrategy::PlainDiffusion, seed, nsfw_retries: retries, ..SynthSpec::default() };
        synthesize("a cat", &spec, SynthServices { images: Some(svc), ..Default::default() }).unwrap()
    }

    #[test]
    fn nsfw_retry_moves_seed() {
        let svc = fake(&[7, 8]);
        let out = run(&svc, 7, 10);
        assert_eq!((out.seed, out.nsfw_retries, out.nsfw_flag), (9, 2, false));
        let seen = svc.seen.lock().unwrap();
        assert_eq!(seen.iter().map(|r| r.seed).collect::<Vec<_>>(), [7, 8, 9]);
        assert!(seen.iter().all(|r| r.guidance == 16.0 && r.steps == 50));
    }

    #[test]
    fn zero_budget_returns_flagged_image() {
        let out = run(&fake(&[3]), 3, 0);
        assert_eq!((out.seed, out.nsfw_retries, out.nsfw_flag), (3, 0, true));
    }

    #[test]
    fn exhausted_budget_accepts_last() {
        let svc = fake(&(0..100).collect::<Vec<_>>());
        let out = run(&svc, 0, 10);
        assert_eq!((out.seed, out.nsfw_retries, out.nsfw_flag), (10, 10, true));
        assert_eq!(svc.seen.lock().unwrap().len(), 11);
    }

    #[test]
    fn grounded_generation_sends_layout() {
        let svc = fake(&[]);
        let chat = ScriptedChat::queued(vec![vec!["Objects: [('a cat', [10, 20, 100, 100])]".into()]]);
        let spec = SynthSpec { strategy: SynthStrategy::LmGrounded, ..SynthSpec::default() };
        let services = SynthServices { images: Some(&svc), llm: Some(&chat), sampling: None };
        let out = synthesize("a cat", &spec, services).unwrap();
        assert_eq!(out.layout.unwrap().objects[0].xywh, [10, 20, 100, 100]);
        let wire = serde_json::to_value(&svc.seen.lock().unwrap()[0]).unwrap();
        assert_eq!(wire["layout"]["objects"][0]["phrase"], "a cat");
    }

    #[test]
    fn mock_and_missing_services() {
        let spec = SynthSpec::default();
        let out = synthesize("a blue chair", &spec, SynthServices::default()).unwrap();
        assert_eq!(out.image.scene().unwrap().objects[0].name, "chair");
        assert!(matches!(synthesize("a grey tabby cat", &spec, SynthServices::default()), Err(SynthError::Grammar(_))));
        let spec = SynthSpec { strategy: SynthStrategy::PlainDiffusion, ..spec };
        assert!(matches!(synthesize("x", &spec, SynthServices::default()), Err(SynthError::Missing(_))));
    }
}
