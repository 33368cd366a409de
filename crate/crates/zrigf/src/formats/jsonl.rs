//! JSONL corpora: image-caption pairs, dialogues (optionally annotated with
//! retrieved image ids) and generation outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use zrigf_core::retrieval::DialogueExample;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairRecord {
    /// Path (relative to the corpus file) or synthetic id of the image.
    pub image: String,
    pub caption: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DialogueRecord {
    pub context: Vec<String>,
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_ids: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_mode: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerationRecord {
    pub context: Vec<String>,
    pub generated: String,
    pub image_ids: Vec<String>,
    pub scores: BTreeMap<String, f64>,
}

impl From<DialogueRecord> for DialogueExample {
    fn from(r: DialogueRecord) -> Self {
        DialogueExample {
            context: r.context,
            response: r.response,
            image_ids: r.image_ids,
            retrieval_mode: r.retrieval_mode,
        }
    }
}

impl From<&DialogueExample> for DialogueRecord {
    fn from(ex: &DialogueExample) -> Self {
        DialogueRecord {
            context: ex.context.clone(),
            response: ex.response.clone(),
            image_ids: ex.image_ids.clone(),
            retrieval_mode: ex.retrieval_mode.clone(),
        }
    }
}

/// Reads a JSONL file of `T`; parse errors carry the path and line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: invalid record", path.display(), i + 1))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
