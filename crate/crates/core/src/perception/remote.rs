use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BBox, BackendConfig, Detection, ImageContent, ImageHandle, Perception, PerceptionError};
use crate::transport::{RetryPolicy, ServiceClient, Transport, TransportError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEndpoints {
    pub detect: Option<String>,
    pub vqa: Option<String>,
    pub itm: Option<String>,
}

/// Forwards every capability to a model service. Failures surface as
/// [`PerceptionError::BackendUnavailable`]; no answer is ever invented.
pub struct RemoteBackend {
    config: BackendConfig,
    client: ServiceClient,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Self {
        let client = ServiceClient::http(config.max_in_flight, Self::retry(&config), Self::timeout(&config));
        RemoteBackend { config, client }
    }

    pub fn with_transport(config: BackendConfig, transport: Box<dyn Transport>) -> Self {
        let client = ServiceClient::new(transport, config.max_in_flight, Self::retry(&config), Self::timeout(&config));
        RemoteBackend { config, client }
    }

    fn retry(config: &BackendConfig) -> RetryPolicy {
        RetryPolicy { max_retries: config.max_retries, ..RetryPolicy::default() }
    }

    fn timeout(config: &BackendConfig) -> Duration {
        Duration::from_secs_f64(config.timeout_secs)
    }

    fn endpoint<'a>(&self, url: &'a Option<String>, name: &str) -> Result<&'a str, PerceptionError> {
        url.as_deref().ok_or_else(|| PerceptionError::BackendUnavailable(format!("no {name} endpoint configured")))
    }

    fn call(&self, url: &str, body: Value) -> Result<Value, PerceptionError> {
        self.client.post(url, &body).map_err(|e: TransportError| PerceptionError::BackendUnavailable(e.to_string()))
    }

    fn image_ref(image: &ImageHandle) -> String {
        match &image.content {
            ImageContent::Bytes(b) => base64::engine::general_purpose::STANDARD.encode(b.as_slice()),
            _ => image.id.clone(),
        }
    }

    fn box_json(b: &BBox) -> Value {
        json!([b.left, b.lower, b.right, b.upper])
    }
}

fn malformed(what: &str) -> PerceptionError {
    PerceptionError::BackendUnavailable(format!("malformed {what} response"))
}

impl Perception for RemoteBackend {
    fn detect(&self, image: &ImageHandle, region: BBox, object_name: &str) -> Result<Vec<Detection>, PerceptionError> {
        let url = self.endpoint(&self.config.endpoints.detect, "detect")?;
        let mut body = json!({"query": object_name, "threshold": self.config.detection_threshold});
        match &image.content {
            ImageContent::Bytes(_) => body["image_b64"] = json!(Self::image_ref(image)),
            _ => body["image_id"] = json!(image.id),
        }
        let resp = self.call(url, body)?;
        let boxes = resp.get("boxes").and_then(Value::as_array).ok_or_else(|| malformed("detect"))?;
        let scores = resp.get("scores").and_then(Value::as_array);
        let mut out = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let coords: Vec<f64> = b
                .as_array()
                .filter(|a| a.len() == 4)
                .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                .ok_or_else(|| malformed("detect box"))?;
            let score = scores.and_then(|s| s.get(i)).and_then(Value::as_f64).unwrap_or(1.0);
            if score < self.config.detection_threshold {
                continue;
            }
            let bbox = BBox::new(coords[0].round() as i64, coords[1].round() as i64, coords[2].round() as i64, coords[3].round() as i64);
            if !bbox.is_valid() || !region.contains_point(bbox.horizontal_center(), bbox.vertical_center()) {
                continue;
            }
            if let Some(bbox) = bbox.intersection(&region) {
                out.push(Detection { bbox, category: object_name.to_string() });
            }
        }
        Ok(out)
    }

    fn verify_property(
        &self,
        image: &ImageHandle,
        region: BBox,
        object_name: &str,
        property: &str,
    ) -> Result<bool, PerceptionError> {
        let score = self.itm_score(image, region, &format!("{property} {object_name}"))?;
        Ok(score >= self.config.itm_threshold)
    }

    fn simple_query(&self, image: &ImageHandle, region: BBox, question: &str) -> Result<String, PerceptionError> {
        let url = self.endpoint(&self.config.endpoints.vqa, "vqa")?;
        let body = json!({"image": Self::image_ref(image), "box": Self::box_json(&region), "question": question});
        let resp = self.call(url, body)?;
        resp.get("answer").and_then(Value::as_str).map(str::to_string).ok_or_else(|| malformed("vqa"))
    }

    fn itm_score(&self, image: &ImageHandle, region: BBox, statement: &str) -> Result<f64, PerceptionError> {
        let url = self.endpoint(&self.config.endpoints.itm, "itm")?;
        let body = json!({"image": Self::image_ref(image), "box": Self::box_json(&region), "text": statement});
        let resp = self.call(url, body)?;
        let score = resp.get("score").and_then(Value::as_f64).ok_or_else(|| malformed("itm"))?;
        Ok(score.clamp(0.0, 1.0))
    }
}
