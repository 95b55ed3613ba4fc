use super::{BBox, Detection, ImageHandle, Perception, PerceptionError, SceneGraph, SceneObject};
use crate::text::{labels_match, normalize_key};

/// Answer returned when no scene fact covers a question.
pub const UNKNOWN_ANSWER: &str = "unknown";

/// Deterministic backend answering from the scene graph carried by the
/// image handle. Pure: identical arguments always give identical results.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedBackend;

impl ScriptedBackend {
    pub fn new() -> Self {
        ScriptedBackend
    }

    fn scene<'a>(&self, image: &'a ImageHandle) -> Result<&'a SceneGraph, PerceptionError> {
        image.scene().ok_or_else(|| PerceptionError::UnresolvableImage(image.id.clone()))
    }
}

/// Object with the largest IoU against `region`; ties go to the earlier
/// object. `None` when nothing overlaps.
pub(crate) fn best_overlap<'a>(scene: &'a SceneGraph, region: &BBox) -> Option<&'a SceneObject> {
    let mut best: Option<(&SceneObject, f64)> = None;
    for o in &scene.objects {
        let iou = o.bbox.iou(region);
        if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
            best = Some((o, iou));
        }
    }
    best.map(|(o, _)| o)
}

fn answer_from_attributes(object: &SceneObject, question: &str) -> Option<String> {
    let q = normalize_key(question);
    let name = normalize_key(&object.name);
    let identity = ["what is this", "what is it", "what is that", "what is the object", "what object is this"];
    if identity.contains(&q.as_str()) || q == format!("what is this {name}") {
        return Some(object.name.clone());
    }
    // "what is the color", "what is the color of the x", "what color is the x"
    let property = q
        .strip_prefix("what is the ")
        .map(|rest| rest.split(" of ").next().unwrap_or(rest))
        .or_else(|| q.strip_prefix("what ").and_then(|rest| rest.split_once(" is ").map(|(p, _)| p)))?;
    object.attribute(property.trim()).map(str::to_string)
}

impl Perception for ScriptedBackend {
    fn detect(&self, image: &ImageHandle, region: BBox, object_name: &str) -> Result<Vec<Detection>, PerceptionError> {
        let scene = self.scene(image)?;
        Ok(scene
            .objects
            .iter()
            .filter(|o| labels_match(&o.name, object_name))
            .filter(|o| region.contains_point(o.bbox.horizontal_center(), o.bbox.vertical_center()))
            .filter_map(|o| o.bbox.intersection(&region).map(|bbox| Detection { bbox, category: o.name.clone() }))
            .collect())
    }

    fn verify_property(
        &self,
        image: &ImageHandle,
        region: BBox,
        _object_name: &str,
        property: &str,
    ) -> Result<bool, PerceptionError> {
        let scene = self.scene(image)?;
        let wanted = normalize_key(property);
        Ok(best_overlap(scene, &region).is_some_and(|o| {
            o.attributes.iter().any(|(name, value)| normalize_key(name) == wanted || normalize_key(value) == wanted)
        }))
    }

    fn simple_query(&self, image: &ImageHandle, region: BBox, question: &str) -> Result<String, PerceptionError> {
        let scene = self.scene(image)?;
        let key = normalize_key(question);
        let lookup = |facts: &std::collections::BTreeMap<String, String>| {
            facts.iter().find(|(q, _)| normalize_key(q) == key).map(|(_, a)| a.clone())
        };
        let object = best_overlap(scene, &region);
        let answer = object
            .and_then(|o| lookup(&o.qa_facts))
            .or_else(|| lookup(&scene.qa_facts))
            .or_else(|| object.and_then(|o| answer_from_attributes(o, question)));
        Ok(answer.unwrap_or_else(|| UNKNOWN_ANSWER.to_string()))
    }

    fn itm_score(&self, image: &ImageHandle, _region: BBox, statement: &str) -> Result<f64, PerceptionError> {
        let scene = self.scene(image)?;
        let key = normalize_key(statement);
        Ok(match scene.match_facts.iter().find(|(s, _)| normalize_key(s) == key) {
            Some((_, true)) => 1.0,
            Some((_, false)) => 0.0,
            None => 0.5,
        })
    }
}
