//! Dialog manifest loading: one JSON document with a `dialogs` array.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

pub const ROUNDS: usize = 10;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One video's caption, its ten ground-truth question-answer pairs and the
/// ground-truth summary (the description target).
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueRecord {
    pub video_id: String,
    pub caption: String,
    pub qa_pairs: Vec<(String, String)>,
    pub summary: String,
    pub split: Split,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error reading manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("record {video_id}: expected {ROUNDS} question-answer pairs, found {found}")]
    WrongQaCount { video_id: String, found: usize },
    #[error("record {video_id}: empty {field}")]
    EmptyField { video_id: String, field: &'static str },
    #[error("duplicate video_id {0} within split")]
    DuplicateVideoId(String),
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    dialogs: Vec<ManifestDialog>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDialog {
    video_id: String,
    caption: String,
    summary: String,
    dialog: Vec<ManifestQa>,
}

#[derive(Serialize, Deserialize)]
struct ManifestQa {
    question: String,
    answer: String,
}

fn validate(rec: &DialogueRecord) -> Result<(), ManifestError> {
    if rec.qa_pairs.len() != ROUNDS {
        return Err(ManifestError::WrongQaCount {
            video_id: rec.video_id.clone(),
            found: rec.qa_pairs.len(),
        });
    }
    let empty = |s: &str| s.trim().is_empty();
    if empty(&rec.caption) {
        return Err(ManifestError::EmptyField { video_id: rec.video_id.clone(), field: "caption" });
    }
    if empty(&rec.summary) {
        return Err(ManifestError::EmptyField { video_id: rec.video_id.clone(), field: "summary" });
    }
    for (q, a) in &rec.qa_pairs {
        if empty(q) {
            return Err(ManifestError::EmptyField { video_id: rec.video_id.clone(), field: "question" });
        }
        if empty(a) {
            return Err(ManifestError::EmptyField { video_id: rec.video_id.clone(), field: "answer" });
        }
    }
    Ok(())
}

/// Load and validate a manifest; record order is preserved.
pub fn load_manifest(path: &Path, split: Split) -> Result<Vec<DialogueRecord>, ManifestError> {
    let text = std::fs::read_to_string(path)?;
    let doc: ManifestDoc = serde_json::from_str(&text)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(doc.dialogs.len());
    for d in doc.dialogs {
        if !seen.insert(d.video_id.clone()) {
            return Err(ManifestError::DuplicateVideoId(d.video_id));
        }
        let rec = DialogueRecord {
            video_id: d.video_id,
            caption: d.caption,
            qa_pairs: d.dialog.into_iter().map(|qa| (qa.question, qa.answer)).collect(),
            summary: d.summary,
            split,
        };
        validate(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, records: &[DialogueRecord]) -> Result<(), ManifestError> {
    let doc = ManifestDoc {
        dialogs: records
            .iter()
            .map(|r| ManifestDialog {
                video_id: r.video_id.clone(),
                caption: r.caption.clone(),
                summary: r.summary.clone(),
                dialog: r
                    .qa_pairs
                    .iter()
                    .map(|(q, a)| ManifestQa { question: q.clone(), answer: a.clone() })
                    .collect(),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> DialogueRecord {
        DialogueRecord {
            video_id: id.to_string(),
            caption: "a man walks".into(),
            qa_pairs: (0..ROUNDS).map(|i| (format!("q{i}"), format!("a{i}"))).collect(),
            summary: "a man walked around".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn roundtrip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let recs: Vec<_> = (0..5).map(|i| record(&format!("v{i}"))).collect();
        save_manifest(&path, &recs).unwrap();
        let loaded = load_manifest(&path, Split::Train).unwrap();
        assert_eq!(recs, loaded);
    }

    #[test]
    fn empty_manifest_is_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"dialogs": []}"#).unwrap();
        assert!(load_manifest(&path, Split::Test).unwrap().is_empty());
    }

    #[test]
    fn wrong_qa_count_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut rec = record("bad-one");
        rec.qa_pairs.pop();
        save_manifest(&path, &[rec]).unwrap();
        let err = load_manifest(&path, Split::Train).unwrap_err();
        assert!(err.to_string().contains("bad-one"), "{err}");
        assert!(err.to_string().contains('9'), "{err}");
    }

    #[test]
    fn duplicate_video_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&path, &[record("x"), record("x")]).unwrap();
        let err = load_manifest(&path, Split::Train).unwrap_err();
        assert!(matches!(err, ManifestError::DuplicateVideoId(_)));
    }

    #[test]
    fn empty_caption_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut rec = record("v");
        rec.caption = "  ".into();
        save_manifest(&path, &[rec]).unwrap();
        assert!(load_manifest(&path, Split::Train).is_err());
    }
}
