//! The exemplar database: utterance records with precomputed semantic
//! vectors, persisted as a JSON manifest plus a `SEMB` blob.
//!
//! The store does not care which encoder produced the vectors; it only
//! records their dimension.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Sarcastic,
    NonSarcastic,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Sarcastic, Label::NonSarcastic];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Sarcastic => "sarcastic",
            Label::NonSarcastic => "non_sarcastic",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    /// Accepts the canonical names as well as `1`/`0` and `true`/`false`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sarcastic" | "1" | "true" => Ok(Label::Sarcastic),
            "non_sarcastic" | "0" | "false" => Ok(Label::NonSarcastic),
            other => Err(Error::Validation(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub label: Label,
    /// Transcript of the utterance, if known.
    pub text: Option<String>,
    pub audio_path: Option<String>,
    pub embedding: Vector,
}

impl UtteranceRecord {
    pub fn new(id: impl Into<String>, label: Label, embedding: Vector) -> Self {
        Self {
            id: id.into(),
            label,
            text: None,
            audio_path: None,
            embedding,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_audio_path(mut self, path: impl Into<String>) -> Self {
        self.audio_path = Some(path.into());
        self
    }
}

/// Immutable, ordered collection of records sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarIndex {
    dim: usize,
    version: u32,
    records: Vec<UtteranceRecord>,
}

impl ExemplarIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Always false; an index holds at least one record.
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }

    /// Embeddings stacked in record order.
    pub fn embedding_matrix(&self) -> Matrix {
        let data = self
            .records
            .iter()
            .flat_map(|r| r.embedding.as_slice().iter().copied())
            .collect();
        Matrix::from_raw_unchecked(self.records.len(), self.dim, data)
    }
}

/// Builds an index in input order. Embeddings are rounded to `f32`, the
/// precision they are persisted at, so that a save/load round trip is exact.
pub fn build_index(records: Vec<UtteranceRecord>) -> Result<ExemplarIndex> {
    let dim = records.first().ok_or(Error::EmptyIndex)?.embedding.dim();
    let mut seen = HashSet::with_capacity(records.len());
    let mut out = Vec::with_capacity(records.len());
    for mut record in records {
        if record.id.is_empty() {
            return Err(Error::Validation("record id must be non-empty".into()));
        }
        if record.embedding.dim() != dim {
            return Err(Error::Dimension(format!(
                "record `{}` has a {}-dimensional embedding, index dimension is {dim}",
                record.id,
                record.embedding.dim()
            )));
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        let quantized = record
            .embedding
            .as_slice()
            .iter()
            .map(|&v| v as f32 as f64)
            .collect();
        record.embedding = Vector::new(quantized)?;
        if record.embedding.norm() == 0.0 {
            return Err(Error::ZeroNorm(format!(
                "embedding of record `{}`",
                record.id
            )));
        }
        out.push(record);
    }
    Ok(ExemplarIndex {
        dim,
        version: blob::VERSION,
        records: out,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    dim: usize,
    count: usize,
    records: Vec<ManifestRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_path: Option<String>,
    row: usize,
}

/// Writes the manifest (pretty JSON) and the embedding blob. Output is a
/// pure function of the index, so re-saving yields identical bytes.
pub fn save_index(index: &ExemplarIndex, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let manifest = Manifest {
        version: index.version,
        dim: index.dim,
        count: index.records.len(),
        records: index
            .records
            .iter()
            .enumerate()
            .map(|(row, r)| ManifestRecord {
                id: r.id.clone(),
                label: r.label,
                text: r.text.clone(),
                audio_path: r.audio_path.clone(),
                row,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    blob::write(blob_path, &index.embedding_matrix())?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

pub fn load_index(manifest_path: &Path, blob_path: &Path) -> Result<ExemplarIndex> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let bytes = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    parse_index(&text, &bytes)
}

/// Parses an in-memory manifest/blob pair with the same checks as
/// [`load_index`].
pub fn parse_index(manifest_text: &str, blob_bytes: &[u8]) -> Result<ExemplarIndex> {
    let manifest: Manifest =
        serde_json::from_str(manifest_text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let header = blob::decode_header(blob_bytes)?;
    if manifest.version != blob::VERSION {
        return Err(Error::Format(format!(
            "manifest version {} is unsupported",
            manifest.version
        )));
    }
    if header.count as usize != manifest.count || header.dim as usize != manifest.dim {
        return Err(Error::Format(format!(
            "manifest declares {}x{} but blob header declares {}x{}",
            manifest.count, manifest.dim, header.count, header.dim
        )));
    }
    if manifest.records.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest count is {} but lists {} records",
            manifest.count,
            manifest.records.len()
        )));
    }
    let embeddings = blob::decode(blob_bytes)?;

    let mut rows_seen = vec![false; manifest.count];
    let mut records = Vec::with_capacity(manifest.count);
    for entry in manifest.records {
        if entry.row >= manifest.count || std::mem::replace(&mut rows_seen[entry.row], true) {
            return Err(Error::Validation(format!(
                "record `{}` points at row {} which is out of range or already used",
                entry.id, entry.row
            )));
        }
        let embedding = Vector::new(embeddings.row(entry.row).to_vec())?;
        records.push(UtteranceRecord {
            id: entry.id,
            label: entry.label,
            text: entry.text,
            audio_path: entry.audio_path,
            embedding,
        });
    }
    build_index(records).map_err(|e| match e {
        Error::Validation(_) => e,
        other => Error::Validation(other.to_string()),
    })
}
