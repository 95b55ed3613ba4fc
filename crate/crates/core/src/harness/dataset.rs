//! JSONL benchmark records and their images.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::perception::{ImageHandle, SceneGraph};
use crate::templates::Task;
use crate::text::normalize_answer;

/// `(line number, reason)` of a malformed line dropped in lenient mode.
pub type SkippedLine = (usize, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub task: Task,
    /// ITM queries read `Verify image matches text="..."`.
    pub query: String,
    /// Scene-graph `.json` file or raw image file, relative to the dataset.
    pub image: PathBuf,
    pub gold: String,
    /// Pixel size of raw images; scene graphs carry their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<i64>,
}

impl DatasetRecord {
    fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.query.trim().is_empty() {
            return Err(format!("record {}: empty query", self.id));
        }
        if self.task == Task::Itm && !matches!(normalize_answer(&self.gold).as_str(), "yes" | "no") {
            return Err(format!("record {}: itm gold must be yes or no, got {:?}", self.id, self.gold));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset has no records")]
    Empty,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Directory image paths are resolved against.
    pub base_dir: PathBuf,
    /// `(line, message)` for every line dropped in lenient mode.
    pub skipped: Vec<SkippedLine>,
}

/// Parses JSONL text. Blank lines are ignored. In lenient mode malformed
/// lines are logged and returned as `(line, message)` instead of failing
/// the load.
pub fn parse_dataset(text: &str, lenient: bool) -> Result<(Vec<DatasetRecord>, Vec<SkippedLine>), FormatError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DatasetRecord>(raw)
            .map_err(|e| FormatError::Line { line, message: e.to_string() })
            .and_then(|r| r.validate().map(|_| r).map_err(|message| FormatError::Line { line, message }))
            .and_then(|r| {
                if ids.contains(&r.id) {
                    Err(FormatError::DuplicateId { line, id: r.id })
                } else {
                    Ok(r)
                }
            });
        match parsed {
            Ok(r) => {
                ids.insert(r.id.clone());
                records.push(r);
            }
            Err(e) if lenient => {
                log::warn!("skipping dataset {e}");
                skipped.push((line, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((records, skipped))
}

pub fn ingest(path: &Path, lenient: bool) -> Result<Dataset, FormatError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FormatError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let (records, skipped) = parse_dataset(&text, lenient)?;
    if records.is_empty() {
        return Err(FormatError::Empty);
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Dataset { records, base_dir, skipped })
}

#[derive(Debug, thiserror::Error)]
pub enum ImageLoadError {
    #[error("record {id}: cannot read image {path}: {message}")]
    Io { id: String, path: PathBuf, message: String },
    #[error("record {id}: invalid scene graph {path}: {message}")]
    Scene { id: String, path: PathBuf, message: String },
    #[error("record {id}: raw image {path} needs width and height")]
    MissingSize { id: String, path: PathBuf },
}

pub fn load_image(record: &DatasetRecord, base_dir: &Path) -> Result<ImageHandle, ImageLoadError> {
    let path = base_dir.join(&record.image);
    let io = |e: std::io::Error| ImageLoadError::Io { id: record.id.clone(), path: path.clone(), message: e.to_string() };
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let text = std::fs::read_to_string(&path).map_err(io)?;
        let scene = SceneGraph::from_json(&text).map_err(|e| ImageLoadError::Scene {
            id: record.id.clone(),
            path: path.clone(),
            message: e.to_string(),
        })?;
        return Ok(ImageHandle::from_scene(scene));
    }
    let (Some(w), Some(h)) = (record.width, record.height) else {
        return Err(ImageLoadError::MissingSize { id: record.id.clone(), path });
    };
    Ok(ImageHandle::from_bytes(std::fs::read(&path).map_err(io)?, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, task: &str, gold: &str) -> String {
        format!(r#"{{"id":"{id}","task":"{task}","query":"Is there a cat?","image":"s.json","gold":"{gold}"}}"#)
    }

    #[test]
    fn three_valid_lines() {
        let text = [line("a", "vqa", "cat"), line("b", "itm", "yes"), String::new(), line("c", "itm", "No")].join("\n");
        let (r, _) = parse_dataset(&text, false).unwrap();
        assert_eq!(r.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn duplicate_id_names_it() {
        let text = [line("a", "vqa", "cat"), line("a", "vqa", "dog")].join("\n");
        let err = parse_dataset(&text, false).unwrap_err();
        assert!(matches!(&err, FormatError::DuplicateId { line: 2, id } if id == "a"));
        assert!(err.to_string().contains("duplicate id a"));
    }

    #[test]
    fn itm_gold_must_be_binary() {
        let err = parse_dataset(&line("x", "itm", "maybe"), false).unwrap_err();
        assert!(matches!(err, FormatError::Line { line: 1, .. }));
    }

    #[test]
    fn lenient_skips_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let text = [line("a", "vqa", "cat"), "{not json".into(), line("a", "vqa", "x"), line("b", "itm", "maybe"), line("c", "itm", "yes")]
            .join("\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(ingest(&path, false), Err(FormatError::Line { line: 2, .. })));
        let ds = ingest(&path, true).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), [2, 3, 4]);
        assert_eq!(ds.base_dir, dir.path());
    }

    #[test]
    fn images_resolve_relative_to_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.json"), r#"{"width":10,"height":10,"objects":[{"name":"cat","box":[0,0,5,5]}]}"#)
            .unwrap();
        std::fs::write(dir.path().join("p.png"), [1u8, 2, 3]).unwrap();
        let mut rec = parse_dataset(&line("a", "vqa", "cat"), false).unwrap().0.remove(0);
        let img = load_image(&rec, dir.path()).unwrap();
        assert_eq!(img.scene().unwrap().objects[0].name, "cat");
        rec.image = "p.png".into();
        assert!(matches!(load_image(&rec, dir.path()), Err(ImageLoadError::MissingSize { .. })));
        rec.width = Some(4);
        rec.height = Some(4);
        assert!(load_image(&rec, dir.path()).unwrap().id.starts_with("sha256:"));
    }
}
