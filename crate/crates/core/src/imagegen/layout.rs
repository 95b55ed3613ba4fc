//! LM-grounded layout planning: ask the chat model for phrase/box pairs on a
//! 512x512 canvas and parse its answer.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{ChatClient, ChatMessage, ChatRequest, Sampling};
use crate::perception::BBox;
use crate::templates;
use crate::transport::ServiceError;

pub const CANVAS: i64 = 512;
pub const LAYOUT_SEQUENCES: usize = 5;
pub const DEFAULT_BACKGROUND: &str = "A realistic scene";

/// One phrase with its `[x, y, w, h]` box, origin top-left.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutObject {
    pub phrase: String,
    #[serde(rename = "box")]
    pub xywh: [i64; 4],
}

impl LayoutObject {
    /// Box in scene coordinates (y up, origin bottom-left).
    pub fn to_bbox(&self) -> BBox {
        let [x, y, w, h] = self.xywh;
        BBox::new(x, CANVAS - (y + h), x + w, CANVAS - y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub objects: Vec<LayoutObject>,
    pub background_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_prompt: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("no parsable layout in {0} sequences")]
    Unparsable(usize),
}

fn object_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\s*(-?\d+(?:\.\d+)?)\s*";
        Regex::new(&format!(r#"\(\s*(?:'([^']*)'|"([^"]*)")\s*,\s*\[{num},{num},{num},{num}\]\s*\)"#)).unwrap()
    })
}

fn clamp_box(raw: [f64; 4]) -> Option<[i64; 4]> {
    let [x, y, w, h] = raw.map(|v| v.round() as i64);
    let (x0, y0) = (x.clamp(0, CANVAS), y.clamp(0, CANVAS));
    let (x1, y1) = ((x + w).clamp(0, CANVAS), (y + h).clamp(0, CANVAS));
    (x1 > x0 && y1 > y0).then_some([x0, y0, x1 - x0, y1 - y0])
}

/// Parses `Objects: [('phrase', [x, y, w, h]), ...]` with optional
/// `Background prompt:` and `Negative prompt:` lines. The `Objects:` prefix
/// may be absent since the prompt already ends with it. Boxes are clamped to
/// the canvas; returns `None` when no object survives.
pub fn parse_layout(text: &str) -> Option<LayoutPlan> {
    let mut objects_line = None;
    let mut background = None;
    let mut negative = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Objects:") {
            objects_line.get_or_insert(rest.trim());
        } else if let Some(rest) = line.strip_prefix("Background prompt:") {
            background.get_or_insert(rest.trim());
        } else if let Some(rest) = line.strip_prefix("Negative prompt:") {
            negative.get_or_insert(rest.trim());
        } else if i == 0 && line.starts_with('[') {
            objects_line.get_or_insert(line);
        }
    }
    let list = objects_line?;
    if !(list.starts_with('[') && list.ends_with(']')) {
        return None;
    }
    let objects: Vec<LayoutObject> = object_re()
        .captures_iter(list)
        .filter_map(|c| {
            let phrase = c.get(1).or_else(|| c.get(2))?.as_str().trim();
            let nums: Vec<f64> = (3..7).map(|i| c[i].parse().unwrap()).collect();
            let xywh = clamp_box([nums[0], nums[1], nums[2], nums[3]])?;
            (!phrase.is_empty()).then(|| LayoutObject { phrase: phrase.to_string(), xywh })
        })
        .collect();
    if objects.is_empty() {
        return None;
    }
    Some(LayoutPlan {
        objects,
        background_prompt: background.filter(|b| !b.is_empty()).unwrap_or(DEFAULT_BACKGROUND).to_string(),
        negative_prompt: negative.filter(|n| !n.is_empty() && *n != "None").map(str::to_string),
    })
}

/// Requests [`LAYOUT_SEQUENCES`] candidates and keeps the first one that
/// parses to a non-empty object list.
pub fn plan_layout(caption: &str, llm: &dyn ChatClient, sampling: &Sampling) -> Result<LayoutPlan, LayoutError> {
    let prompt = templates::render_layout_prompt(caption);
    let sequences = llm.complete(&ChatRequest::new(vec![ChatMessage::user(prompt)], LAYOUT_SEQUENCES, sampling))?;
    sequences.iter().find_map(|s| parse_layout(s)).ok_or(LayoutError::Unparsable(sequences.len()))
}
