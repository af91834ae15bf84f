//! Raw text embeddings for graph nodes and queries.
//!
//! Two providers exist. The hashed provider is a signed feature-hashing
//! encoder over word tokens and character trigrams; it is deterministic and
//! needs no model. The file provider looks texts up in a precomputed table
//! of vectors produced by an external encoder.
//!
//! Hashed features, for a given `seed` and dimension `D`:
//!
//! * text is split on whitespace; each token is lowercased and stripped of
//!   leading and trailing non-alphanumeric characters (empty tokens dropped);
//! * every token contributes the feature `w\x1f<token>` and, for each window
//!   of three consecutive characters, the feature `c\x1f<trigram>`;
//! * a feature hashes as 64-bit FNV-1a over `seed.to_le_bytes()` followed by
//!   the feature bytes; bucket = `hash % D`, sign = `-1` if the top bit is set;
//! * the accumulated vector is L2-normalized.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::MultiLkg;

pub const DEFAULT_HASH_DIM: usize = 512;
pub const MIN_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A unit-norm, finite embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbedding(Vec<f64>);

impl RawEmbedding {
    /// Normalizes `values`; rejects zero, empty, or non-finite input.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "embedding".into(), index: i });
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Precondition("zero embedding vector".into()));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Precomputed vectors keyed by exact text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, RawEmbedding>,
}

#[derive(Deserialize)]
struct TableLine {
    key: String,
    vector: Vec<f64>,
}

impl EmbeddingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
            let rec: TableLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let d = *dim.get_or_insert(rec.vector.len());
            if rec.vector.len() != d {
                return Err(err(format!("vector has {} entries, expected {d}", rec.vector.len())));
            }
            let v = RawEmbedding::normalized(rec.vector).map_err(|e| err(e.to_string()))?;
            vectors.insert(rec.key, v);
        }
        let dim = dim.ok_or_else(|| Error::Config(format!("{} holds no embeddings", path.display())))?;
        if dim < MIN_DIM {
            return Err(Error::Config(format!("embedding dimension {dim} is below {MIN_DIM}")));
        }
        Ok(Self { dim, vectors })
    }

    pub fn from_vectors(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        if dim < MIN_DIM {
            return Err(Error::Config(format!("embedding dimension {dim} is below {MIN_DIM}")));
        }
        let mut vectors = HashMap::new();
        for (k, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!("vector for {k:?} has {} entries, expected {dim}", v.len())));
            }
            vectors.insert(k, RawEmbedding::normalized(v)?);
        }
        Ok(Self { dim, vectors })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    Hashed { seed: u64, dim: usize },
    File(Arc<EmbeddingTable>),
}

impl EmbeddingSource {
    pub fn hashed(seed: u64, dim: usize) -> Result<Self> {
        if dim < MIN_DIM {
            return Err(Error::Config(format!("embedding dimension {dim} is below {MIN_DIM}")));
        }
        Ok(Self::Hashed { seed, dim })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hashed { dim, .. } => *dim,
            Self::File(t) => t.dim,
        }
    }

    pub fn embed(&self, text: &str) -> Result<RawEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        match self {
            Self::Hashed { seed, dim } => Ok(hashed_embedding(*seed, *dim, text)),
            Self::File(table) => table
                .vectors
                .get(text)
                .cloned()
                .ok_or_else(|| Error::MissingEmbedding(text.to_owned())),
        }
    }
}

/// Lowercased whitespace tokens with punctuation trimmed from both ends.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

fn hashed_embedding(seed: u64, dim: usize, text: &str) -> RawEmbedding {
    let mut acc = vec![0.0f64; dim];
    let mut add = |kind: u8, feature: &str| {
        let mut bytes = Vec::with_capacity(feature.len() + 2);
        bytes.push(kind);
        bytes.push(0x1f);
        bytes.extend_from_slice(feature.as_bytes());
        let h = fnv1a(seed, &bytes);
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    };
    for token in tokenize(text) {
        add(b'w', &token);
        let chars: Vec<char> = token.chars().collect();
        for w in chars.windows(3) {
            add(b'c', &w.iter().collect::<String>());
        }
    }
    if acc.iter().all(|&v| v == 0.0) {
        acc[0] += 1.0;
    }
    RawEmbedding::normalized(acc).expect("hashed accumulator is finite and nonzero")
}

/// Raw embedding matrices, one row per node of each level.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraphEmbeddings {
    pub entities: Array2<f64>,
    pub chunks: Array2<f64>,
    pub documents: Array2<f64>,
}

impl RawGraphEmbeddings {
    pub fn dim(&self) -> usize {
        self.documents.ncols()
    }
}

/// Text embedded for a document node: title and body joined by a space.
pub fn document_text(title: &str, text: &str) -> String {
    if title.is_empty() {
        text.to_owned()
    } else {
        format!("{title} {text}")
    }
}

fn stack(dim: usize, rows: Vec<RawEmbedding>) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flat_map(RawEmbedding::into_vec).collect();
    Array2::from_shape_vec((n, dim), flat).expect("rows share the source dimension")
}

pub fn embed_graph(source: &EmbeddingSource, g: &MultiLkg) -> Result<RawGraphEmbeddings> {
    let dim = source.dim();
    let entities = g.entities.iter().map(|e| source.embed(e)).collect::<Result<Vec<_>>>()?;
    let chunks = g.chunks.iter().map(|c| source.embed(&c.text)).collect::<Result<Vec<_>>>()?;
    let documents = g
        .documents
        .iter()
        .map(|d| source.embed(&document_text(&d.title, &d.text)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RawGraphEmbeddings {
        entities: stack(dim, entities),
        chunks: stack(dim, chunks),
        documents: stack(dim, documents),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusBundle;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hashed_is_deterministic() {
        let src = EmbeddingSource::hashed(7, 512).unwrap();
        assert_eq!(src.embed("alpha beta").unwrap(), src.embed("alpha beta").unwrap());
        assert!((cosine(src.embed("alpha beta").unwrap().as_slice(), src.embed("alpha beta").unwrap().as_slice()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_strings_are_unit_norm() {
        let src = EmbeddingSource::hashed(7, 512).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let len = rng.gen_range(1..40);
            let s: String = (0..len).map(|_| rng.gen_range(b' '..=b'~') as char).collect();
            let s = format!("x{s}");
            let v = src.embed(&s).unwrap();
            let norm = v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "{s:?}");
            assert!(v.as_slice().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn punctuation_only_text_falls_back_to_first_bucket() {
        let src = EmbeddingSource::hashed(3, 16).unwrap();
        let v = src.embed("?? !!").unwrap();
        assert_eq!(v.as_slice()[0], 1.0);
    }

    #[test]
    fn whitespace_text_is_rejected() {
        let src = EmbeddingSource::hashed(3, 16).unwrap();
        assert!(matches!(src.embed(" \t "), Err(Error::EmptyText)));
    }

    #[test]
    fn small_dimension_is_rejected() {
        assert!(EmbeddingSource::hashed(1, 4).is_err());
    }

    #[test]
    fn file_mode_lookup_and_miss() {
        let table = EmbeddingTable::from_vectors(8, [("hello".to_string(), vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
        let src = EmbeddingSource::File(Arc::new(table));
        assert_eq!(src.embed("hello").unwrap().as_slice()[..2], [0.6, 0.8]);
        match src.embed("bye") {
            Err(Error::MissingEmbedding(k)) => assert_eq!(k, "bye"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_mode_loads_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        std::fs::write(&path, "{\"key\":\"a\",\"vector\":[1,0,0,0,0,0,0,0]}\n{\"key\":\"b\",\"vector\":[0,2,0,0,0,0,0,0]}\n").unwrap();
        let table = EmbeddingTable::load(&path).unwrap();
        let src = EmbeddingSource::File(Arc::new(table));
        assert_eq!(src.dim(), 8);
        assert_eq!(src.embed("b").unwrap().as_slice()[1], 1.0);
    }

    #[test]
    fn graph_matrices_have_level_shapes() {
        let mut b = CorpusBundle::default();
        b.push(serde_json::from_str(r#"{"kind":"document","doc_id":"d","title":"T","text":"a r b. c."}"#).unwrap());
        b.push(serde_json::from_str(r#"{"kind":"chunk","chunk_id":"c0","doc_id":"d","position":0,"text":"a r b."}"#).unwrap());
        b.push(serde_json::from_str(r#"{"kind":"chunk","chunk_id":"c1","doc_id":"d","position":1,"text":"c."}"#).unwrap());
        b.push(serde_json::from_str(r#"{"kind":"triple","subject":"a","predicate":"r","object":"b","chunk_id":"c0","doc_id":"d"}"#).unwrap());
        let g = MultiLkg::build(&b).unwrap();
        let src = EmbeddingSource::hashed(7, 64).unwrap();
        let raw = embed_graph(&src, &g).unwrap();
        assert_eq!(raw.entities.dim(), (2, 64));
        assert_eq!(raw.chunks.dim(), (2, 64));
        assert_eq!(raw.documents.dim(), (1, 64));
        assert_eq!(raw.documents.row(0).to_vec(), src.embed("T a r b. c.").unwrap().into_vec());

        let entries = ["a", "b", "a r b.", "c.", "T a r b. c."]
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let mut v = vec![0.0; 8];
                v[i] = 1.0;
                (k.to_string(), v)
            });
        let file = EmbeddingSource::File(Arc::new(EmbeddingTable::from_vectors(8, entries).unwrap()));
        let raw = embed_graph(&file, &g).unwrap();
        assert_eq!(raw.chunks[[1, 3]], 1.0);
        assert_eq!(raw.documents[[0, 4]], 1.0);
    }
}
