use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::text::normalize_answer;

/// Axis-aligned box in pixel coordinates. The origin is the bottom-left
/// corner of the image and `y` grows upward, so `lower < upper`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub left: i64,
    pub lower: i64,
    pub right: i64,
    pub upper: i64,
}

impl BBox {
    pub const fn new(left: i64, lower: i64, right: i64, upper: i64) -> Self {
        BBox { left, lower, right, upper }
    }

    pub fn is_valid(&self) -> bool {
        self.left < self.right && self.lower < self.upper
    }

    pub fn width(&self) -> i64 {
        self.right - self.left
    }

    pub fn height(&self) -> i64 {
        self.upper - self.lower
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn horizontal_center(&self) -> f64 {
        (self.left + self.right) as f64 / 2.0
    }

    pub fn vertical_center(&self) -> f64 {
        (self.lower + self.upper) as f64 / 2.0
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.left >= self.left && other.right <= self.right && other.lower >= self.lower && other.upper <= self.upper
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.left as f64 && x <= self.right as f64 && y >= self.lower as f64 && y <= self.upper as f64
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.left.max(other.left),
            self.lower.max(other.lower),
            self.right.min(other.right),
            self.upper.min(other.upper),
        );
        b.is_valid().then_some(b)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        if inter == 0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.left, self.lower, self.right, self.upper].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [left, lower, right, upper] = <[i64; 4]>::deserialize(d)?;
        Ok(BBox { left, lower, right, upper })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub attributes: BTreeSet<(String, String)>,
    #[serde(default)]
    pub qa_facts: BTreeMap<String, String>,
}

impl SceneObject {
    pub fn new(name: impl Into<String>, bbox: BBox) -> Self {
        SceneObject { name: name.into(), bbox, attributes: BTreeSet::new(), qa_facts: BTreeMap::new() }
    }

    pub fn with_attribute(mut self, property: &str, value: &str) -> Self {
        self.attributes.insert((property.to_string(), value.to_string()));
        self
    }

    pub fn with_fact(mut self, question: &str, answer: &str) -> Self {
        self.qa_facts.insert(question.to_string(), answer.to_string());
        self
    }

    pub fn attribute(&self, property: &str) -> Option<&str> {
        self.attributes.iter().find(|(p, _)| p.eq_ignore_ascii_case(property)).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("canvas must be non-empty, got {width}x{height}")]
    EmptyCanvas { width: i64, height: i64 },
    #[error("object {index} has an empty name")]
    EmptyName { index: usize },
    #[error("object {index} ({name}) has a degenerate box")]
    DegenerateBox { index: usize, name: String },
    #[error("object {index} ({name}) lies outside the canvas")]
    OutOfCanvas { index: usize, name: String },
    #[error("scene qa fact {0:?} collides with another key after normalization")]
    DuplicateFact(String),
    #[error("invalid scene json: {0}")]
    Json(String),
}

/// Structured stand-in for an image, consumed by the scripted backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub width: i64,
    pub height: i64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub qa_facts: BTreeMap<String, String>,
    #[serde(default)]
    pub match_facts: BTreeMap<String, bool>,
}

impl SceneGraph {
    pub fn new(width: i64, height: i64) -> Self {
        SceneGraph { width, height, objects: Vec::new(), qa_facts: BTreeMap::new(), match_facts: BTreeMap::new() }
    }

    pub fn with_object(mut self, object: SceneObject) -> Self {
        self.objects.push(object);
        self
    }

    pub fn canvas(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width <= 0 || self.height <= 0 {
            return Err(SceneError::EmptyCanvas { width: self.width, height: self.height });
        }
        let canvas = self.canvas();
        for (index, o) in self.objects.iter().enumerate() {
            if o.name.trim().is_empty() {
                return Err(SceneError::EmptyName { index });
            }
            if !o.bbox.is_valid() {
                return Err(SceneError::DegenerateBox { index, name: o.name.clone() });
            }
            if !canvas.contains(&o.bbox) {
                return Err(SceneError::OutOfCanvas { index, name: o.name.clone() });
            }
        }
        let mut seen = BTreeSet::new();
        for key in self.qa_facts.keys() {
            if !seen.insert(normalize_answer(key)) {
                return Err(SceneError::DuplicateFact(key.clone()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: SceneGraph = serde_json::from_str(text).map_err(|e| SceneError::Json(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    /// Canonical JSON: compact, keys in a fixed order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scene graphs always serialize")
    }
}

#[derive(Debug, Clone)]
pub enum ImageContent {
    Scene(Arc<SceneGraph>),
    Bytes(Arc<Vec<u8>>),
    /// Known to the remote services by id only.
    Remote,
}

/// Content-addressed image reference handed to perception backends.
#[derive(Debug, Clone)]
pub struct ImageHandle {
    pub id: String,
    pub width: i64,
    pub height: i64,
    pub content: ImageContent,
}

impl ImageHandle {
    pub fn from_scene(scene: SceneGraph) -> Self {
        let digest = Sha256::digest(scene.to_canonical_json().as_bytes());
        ImageHandle {
            id: format!("scene:{}", hex::encode(digest)),
            width: scene.width,
            height: scene.height,
            content: ImageContent::Scene(Arc::new(scene)),
        }
    }

    pub fn from_bytes(bytes: Vec<u8>, width: i64, height: i64) -> Self {
        let digest = Sha256::digest(&bytes);
        ImageHandle {
            id: format!("sha256:{}", hex::encode(digest)),
            width,
            height,
            content: ImageContent::Bytes(Arc::new(bytes)),
        }
    }

    pub fn remote(id: impl Into<String>, width: i64, height: i64) -> Self {
        ImageHandle { id: id.into(), width, height, content: ImageContent::Remote }
    }

    pub fn scene(&self) -> Option<&SceneGraph> {
        match &self.content {
            ImageContent::Scene(s) => Some(s),
            _ => None,
        }
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }
}

impl PartialEq for ImageHandle {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Serialize for ImageHandle {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("ImageHandle", 3)?;
        st.serialize_field("id", &self.id)?;
        st.serialize_field("width", &self.width)?;
        st.serialize_field("height", &self.height)?;
        st.end()
    }
}
