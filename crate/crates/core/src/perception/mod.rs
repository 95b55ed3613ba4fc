//! Perception capabilities called by the DSL runtime.
//!
//! Two backends implement [`Perception`]: [`ScriptedBackend`] answers from a
//! [`SceneGraph`] and is fully deterministic, [`RemoteBackend`] forwards each
//! capability to a JSON-over-HTTP model service.

mod remote;
mod scene;
mod scripted;

use serde::{Deserialize, Serialize};

pub use remote::{RemoteBackend, RemoteEndpoints};
pub use scene::{BBox, ImageContent, ImageHandle, SceneError, SceneGraph, SceneObject};
pub use scripted::{ScriptedBackend, UNKNOWN_ANSWER};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PerceptionError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("image {0} cannot be resolved by this backend")]
    UnresolvableImage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: String,
}

pub trait Perception: Send + Sync {
    /// Objects named `object_name` inside `region`; returned boxes are
    /// clipped to the region.
    fn detect(&self, image: &ImageHandle, region: BBox, object_name: &str) -> Result<Vec<Detection>, PerceptionError>;

    fn verify_property(
        &self,
        image: &ImageHandle,
        region: BBox,
        object_name: &str,
        property: &str,
    ) -> Result<bool, PerceptionError>;

    fn simple_query(&self, image: &ImageHandle, region: BBox, question: &str) -> Result<String, PerceptionError>;

    /// Image-text similarity in `[0, 1]`.
    fn itm_score(&self, image: &ImageHandle, region: BBox, statement: &str) -> Result<f64, PerceptionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub detection_threshold: f64,
    pub itm_threshold: f64,
    pub endpoints: RemoteEndpoints,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            detection_threshold: 0.2,
            itm_threshold: 0.8,
            endpoints: RemoteEndpoints::default(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 8,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("detection_threshold", self.detection_threshold), ("itm_threshold", self.itm_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        Ok(())
    }
}
