use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::{Embedding, FeatureBlock};

/// Provenance of a memory entry: a photograph or a synthesized image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Unspecified,
    Real,
    Synthetic,
}

impl Source {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Source::Unspecified => 0,
            Source::Real => 1,
            Source::Synthetic => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Source::Unspecified),
            1 => Some(Source::Real),
            2 => Some(Source::Synthetic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordPayload {
    /// Raw per-image embeddings, mean-pooled into the key at build time.
    Embeddings(FeatureBlock),
    /// A pre-pooled key.
    Key(Embedding),
}

impl RecordPayload {
    pub fn dim(&self) -> usize {
        match self {
            RecordPayload::Embeddings(b) => b.dim(),
            RecordPayload::Key(k) => k.dim(),
        }
    }
}

/// One visual-name pair waiting to be inserted into a memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub name: String,
    pub payload: RecordPayload,
    pub source: Source,
}

impl MemoryRecord {
    pub fn from_embeddings(name: impl Into<String>, block: FeatureBlock, source: Source) -> Self {
        Self {
            name: name.into(),
            payload: RecordPayload::Embeddings(block),
            source,
        }
    }

    pub fn from_key(name: impl Into<String>, key: Embedding, source: Source) -> Self {
        Self {
            name: name.into(),
            payload: RecordPayload::Key(key),
            source,
        }
    }
}

/// Wire form of a record, shared by JSON-lines ingestion and the HTTP
/// expand endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordJson {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<Vec<f32>>,
}

impl RecordJson {
    pub fn into_record(self, index: usize) -> Result<MemoryRecord> {
        let invalid = |reason: String| Error::InvalidRecord { index, reason };
        let source = self.source.unwrap_or_default();
        let payload = match (self.embeddings, self.key) {
            (Some(rows), None) => {
                RecordPayload::Embeddings(FeatureBlock::new(rows).map_err(|e| invalid(e.to_string()))?)
            }
            (None, Some(key)) => RecordPayload::Key(Embedding::new(key).map_err(|e| invalid(e.to_string()))?),
            (Some(_), Some(_)) => return Err(invalid("both `embeddings` and `key` given".into())),
            (None, None) => return Err(invalid("one of `embeddings` or `key` is required".into())),
        };
        Ok(MemoryRecord {
            name: self.name,
            payload,
            source,
        })
    }
}

impl From<&MemoryRecord> for RecordJson {
    fn from(rec: &MemoryRecord) -> Self {
        let (embeddings, key) = match &rec.payload {
            RecordPayload::Embeddings(b) => (Some(b.rows().map(<[f32]>::to_vec).collect()), None),
            RecordPayload::Key(k) => (None, Some(k.as_slice().to_vec())),
        };
        Self {
            name: rec.name.clone(),
            source: Some(rec.source),
            embeddings,
            key,
        }
    }
}

/// Parses JSON-lines records. Blank lines are skipped; `index` in errors is
/// the zero-based line number.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<MemoryRecord>> {
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordJson = serde_json::from_str(&line).map_err(|e| Error::InvalidRecord {
            index: line_no,
            reason: e.to_string(),
        })?;
        out.push(raw.into_record(line_no)?);
    }
    Ok(out)
}
