//! Corpus ingestion.
//!
//! The corpus file is line-delimited JSON. Every line is one record tagged
//! with a `kind` of `document`, `chunk` or `triple`:
//!
//! ```text
//! {"kind":"document","doc_id":"d1","title":"Paris","text":"Paris is the capital of France."}
//! {"kind":"chunk","chunk_id":"d1#0","doc_id":"d1","position":0,"text":"Paris is the capital of France."}
//! {"kind":"triple","subject":"Paris","predicate":"is capital of","object":"France","chunk_id":"d1#0","doc_id":"d1"}
//! ```
//!
//! Blank lines are ignored. Record order is preserved in the bundle.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub doc_id: String,
    pub position: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub chunk_id: String,
    pub doc_id: String,
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusRecord {
    Document(DocumentRecord),
    Chunk(ChunkRecord),
    Triple(TripleRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusBundle {
    pub documents: Vec<DocumentRecord>,
    pub chunks: Vec<ChunkRecord>,
    pub triples: Vec<TripleRecord>,
}

impl CorpusBundle {
    pub fn push(&mut self, record: CorpusRecord) {
        match record {
            CorpusRecord::Document(d) => self.documents.push(d),
            CorpusRecord::Chunk(c) => self.chunks.push(c),
            CorpusRecord::Triple(t) => self.triples.push(t),
        }
    }

    /// Records in canonical order: documents, then chunks, then triples.
    pub fn records(&self) -> impl Iterator<Item = CorpusRecord> + '_ {
        self.documents
            .iter()
            .cloned()
            .map(CorpusRecord::Document)
            .chain(self.chunks.iter().cloned().map(CorpusRecord::Chunk))
            .chain(self.triples.iter().cloned().map(CorpusRecord::Triple))
    }
}

/// Canonical entity (and predicate) form: lowercase, trimmed, internal
/// whitespace runs collapsed to one space.
pub fn normalize_entity(surface: &str) -> Result<String> {
    let normalized = surface
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");
    if normalized.is_empty() {
        Err(Error::EmptyEntity)
    } else {
        Ok(normalized)
    }
}

/// Returns every invariant violation in `bundle`; empty means valid.
pub fn validate_bundle(bundle: &CorpusBundle) -> Vec<String> {
    let mut violations = Vec::new();

    let mut doc_index: HashMap<&str, usize> = HashMap::new();
    for (i, doc) in bundle.documents.iter().enumerate() {
        if doc.doc_id.is_empty() {
            violations.push(format!("document #{i} has an empty doc_id"));
        }
        if doc.text.trim().is_empty() {
            violations.push(format!("document {:?} (#{i}) has empty text", doc.doc_id));
        }
        if let Some(&first) = doc_index.get(doc.doc_id.as_str()) {
            violations.push(format!(
                "duplicate doc_id {:?} (documents #{first} and #{i})",
                doc.doc_id
            ));
        } else {
            doc_index.insert(&doc.doc_id, i);
        }
    }

    let mut chunk_index: HashMap<&str, usize> = HashMap::new();
    let mut slots: HashMap<(&str, usize), usize> = HashMap::new();
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, chunk) in bundle.chunks.iter().enumerate() {
        if chunk.chunk_id.is_empty() {
            violations.push(format!("chunk #{i} has an empty chunk_id"));
        }
        if let Some(&first) = chunk_index.get(chunk.chunk_id.as_str()) {
            violations.push(format!(
                "duplicate chunk_id {:?} (chunks #{first} and #{i})",
                chunk.chunk_id
            ));
        } else {
            chunk_index.insert(&chunk.chunk_id, i);
        }
        if !doc_index.contains_key(chunk.doc_id.as_str()) {
            violations.push(format!(
                "chunk {:?} references unknown document {:?}",
                chunk.chunk_id, chunk.doc_id
            ));
            continue;
        }
        if let Some(&first) = slots.get(&(chunk.doc_id.as_str(), chunk.position)) {
            violations.push(format!(
                "document {:?} has two chunks at position {} (chunks #{first} and #{i})",
                chunk.doc_id, chunk.position
            ));
        } else {
            slots.insert((&chunk.doc_id, chunk.position), i);
            positions.entry(&chunk.doc_id).or_default().push(chunk.position);
        }
    }

    for doc in &bundle.documents {
        match positions.get_mut(doc.doc_id.as_str()) {
            None => violations.push(format!("document {:?} has no chunks", doc.doc_id)),
            Some(p) => {
                p.sort_unstable();
                if p.iter().enumerate().any(|(expected, &got)| expected != got) {
                    violations.push(format!(
                        "chunk positions of document {:?} are not contiguous from 0: {:?}",
                        doc.doc_id, p
                    ));
                }
            }
        }
    }

    for (i, triple) in bundle.triples.iter().enumerate() {
        if normalize_entity(&triple.subject).is_err() {
            violations.push(format!("triple #{i} has an empty subject"));
        }
        if normalize_entity(&triple.object).is_err() {
            violations.push(format!("triple #{i} has an empty object"));
        }
        if !doc_index.contains_key(triple.doc_id.as_str()) {
            violations.push(format!(
                "triple #{i} references unknown document {:?}",
                triple.doc_id
            ));
        }
        match chunk_index.get(triple.chunk_id.as_str()) {
            None => violations.push(format!(
                "triple #{i} references unknown chunk {:?}",
                triple.chunk_id
            )),
            Some(&c) => {
                let owner = &bundle.chunks[c].doc_id;
                if owner != &triple.doc_id {
                    violations.push(format!(
                        "triple #{i} names document {:?} but chunk {:?} belongs to {:?}",
                        triple.doc_id, triple.chunk_id, owner
                    ));
                }
            }
        }
    }

    violations
}

/// Reads records from any line source; `origin` is used in diagnostics.
pub fn read_corpus<R: BufRead>(reader: R, origin: &Path) -> Result<CorpusBundle> {
    let mut bundle = CorpusBundle::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        bundle.push(record);
    }
    let violations = validate_bundle(&bundle);
    if violations.is_empty() {
        Ok(bundle)
    } else {
        Err(Error::InvalidBundle(violations))
    }
}

pub fn parse_corpus(path: impl AsRef<Path>) -> Result<CorpusBundle> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_corpus(BufReader::new(file), path)
}

pub fn write_corpus<W: Write>(bundle: &CorpusBundle, mut out: W) -> Result<()> {
    for record in bundle.records() {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Set of document ids, handy for membership checks.
pub fn document_ids(bundle: &CorpusBundle) -> HashSet<&str> {
    bundle.documents.iter().map(|d| d.doc_id.as_str()).collect()
}
