//! The three-level knowledge graph: entities, chunks and documents joined by
//! five typed, undirected edge sets.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_entity, validate_bundle, CorpusBundle, CorpusRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Entity,
    Chunk,
    Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub level: Level,
    pub index: usize,
}

impl NodeRef {
    pub fn entity(index: usize) -> Self {
        Self { level: Level::Entity, index }
    }
    pub fn chunk(index: usize) -> Self {
        Self { level: Level::Chunk, index }
    }
    pub fn document(index: usize) -> Self {
        Self { level: Level::Document, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    #[serde(rename = "oo")]
    EntityEntity,
    #[serde(rename = "oc")]
    EntityChunk,
    #[serde(rename = "od")]
    EntityDocument,
    #[serde(rename = "cc")]
    ChunkChunk,
    #[serde(rename = "cd")]
    ChunkDocument,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 5] = [
        EdgeKind::EntityEntity,
        EdgeKind::EntityChunk,
        EdgeKind::EntityDocument,
        EdgeKind::ChunkChunk,
        EdgeKind::ChunkDocument,
    ];

    /// Levels of the (first, second) endpoint of every pair of this kind.
    pub fn endpoints(self) -> (Level, Level) {
        match self {
            EdgeKind::EntityEntity => (Level::Entity, Level::Entity),
            EdgeKind::EntityChunk => (Level::Entity, Level::Chunk),
            EdgeKind::EntityDocument => (Level::Entity, Level::Document),
            EdgeKind::ChunkChunk => (Level::Chunk, Level::Chunk),
            EdgeKind::ChunkDocument => (Level::Chunk, Level::Document),
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EdgeKind::EntityEntity => "oo",
            EdgeKind::EntityChunk => "oc",
            EdgeKind::EntityDocument => "od",
            EdgeKind::ChunkChunk => "cc",
            EdgeKind::ChunkDocument => "cd",
        };
        f.write_str(s)
    }
}

/// Undirected pairs of one kind. `pairs[i].0` lives on the first endpoint
/// level of `kind`, `pairs[i].1` on the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub kind: EdgeKind,
    pub pairs: Vec<(usize, usize)>,
    /// Predicate text for entity-entity edges, `None` elsewhere.
    pub attributes: Vec<Option<String>>,
}

impl EdgeSet {
    fn new(kind: EdgeKind) -> Self {
        Self { kind, pairs: Vec::new(), attributes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkNode {
    pub id: String,
    pub document: usize,
    pub position: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentNode {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// A triple resolved against the graph's node tables.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GraphTriple {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
    pub chunk: usize,
    pub document: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    /// Triples whose subject and object normalize to the same entity.
    pub skipped_self_pairs: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub chunks: usize,
    pub documents: usize,
    pub entity_entity: usize,
    pub entity_chunk: usize,
    pub entity_document: usize,
    pub chunk_chunk: usize,
    pub chunk_document: usize,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entities  {:>8}", self.entities)?;
        writeln!(f, "chunks    {:>8}", self.chunks)?;
        writeln!(f, "documents {:>8}", self.documents)?;
        writeln!(f, "edges oo  {:>8}", self.entity_entity)?;
        writeln!(f, "edges oc  {:>8}", self.entity_chunk)?;
        writeln!(f, "edges od  {:>8}", self.entity_document)?;
        writeln!(f, "edges cc  {:>8}", self.chunk_chunk)?;
        write!(f, "edges cd  {:>8}", self.chunk_document)
    }
}

/// Adjacency of one edge kind seen from both endpoint levels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Adjacency {
    from_first: Vec<Vec<usize>>,
    from_second: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLkg {
    pub entities: Vec<String>,
    pub chunks: Vec<ChunkNode>,
    pub documents: Vec<DocumentNode>,
    pub triples: Vec<GraphTriple>,
    edges: [EdgeSet; 5],
    adjacency: [Adjacency; 5],
    document_index: HashMap<String, usize>,
    pub report: BuildReport,
}

fn level_len(counts: (usize, usize, usize), level: Level) -> usize {
    match level {
        Level::Entity => counts.0,
        Level::Chunk => counts.1,
        Level::Document => counts.2,
    }
}

impl MultiLkg {
    /// Builds the graph from a validated bundle. Node indices follow first
    /// appearance in the bundle's record order.
    pub fn build(bundle: &CorpusBundle) -> Result<Self> {
        let violations = validate_bundle(bundle);
        if !violations.is_empty() {
            return Err(Error::InvalidBundle(violations));
        }

        let documents: Vec<DocumentNode> = bundle
            .documents
            .iter()
            .map(|d| DocumentNode { id: d.doc_id.clone(), title: d.title.clone(), text: d.text.clone() })
            .collect();
        let document_index: HashMap<String, usize> =
            documents.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();

        let chunks: Vec<ChunkNode> = bundle
            .chunks
            .iter()
            .map(|c| ChunkNode {
                id: c.chunk_id.clone(),
                document: document_index[&c.doc_id],
                position: c.position,
                text: c.text.clone(),
            })
            .collect();
        let chunk_index: HashMap<&str, usize> =
            chunks.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();

        let mut entities = Vec::new();
        let mut entity_index: HashMap<String, usize> = HashMap::new();
        let mut intern = |name: String| -> usize {
            *entity_index.entry(name.clone()).or_insert_with(|| {
                entities.push(name);
                entities.len() - 1
            })
        };

        let mut edges = EdgeKind::ALL.map(EdgeSet::new);
        let mut seen: [HashSet<(usize, usize)>; 5] = Default::default();
        let mut add = |kind: EdgeKind, a: usize, b: usize, attr: Option<String>| {
            let key = if kind == EdgeKind::EntityEntity || kind == EdgeKind::ChunkChunk {
                (a.min(b), a.max(b))
            } else {
                (a, b)
            };
            if seen[kind.slot()].insert(key) {
                edges[kind.slot()].pairs.push((a, b));
                edges[kind.slot()].attributes.push(attr);
            }
        };

        let mut triples = Vec::with_capacity(bundle.triples.len());
        let mut report = BuildReport::default();
        for t in &bundle.triples {
            let subject = intern(normalize_entity(&t.subject)?);
            let object = intern(normalize_entity(&t.object)?);
            let predicate = normalize_entity(&t.predicate).unwrap_or_default();
            let chunk = chunk_index[t.chunk_id.as_str()];
            let document = document_index[&t.doc_id];

            if subject == object {
                report.skipped_self_pairs += 1;
            } else {
                add(EdgeKind::EntityEntity, subject, object, Some(predicate.clone()));
            }
            for e in [subject, object] {
                add(EdgeKind::EntityChunk, e, chunk, None);
                add(EdgeKind::EntityDocument, e, document, None);
            }
            triples.push(GraphTriple { subject, predicate, object, chunk, document });
        }

        let mut by_document: Vec<Vec<usize>> = vec![Vec::new(); documents.len()];
        for (i, c) in chunks.iter().enumerate() {
            by_document[c.document].push(i);
        }
        for members in &mut by_document {
            members.sort_by_key(|&c| chunks[c].position);
            for w in members.windows(2) {
                add(EdgeKind::ChunkChunk, w[0], w[1], None);
            }
        }
        for (i, c) in chunks.iter().enumerate() {
            add(EdgeKind::ChunkDocument, i, c.document, None);
        }

        let counts = (entities.len(), chunks.len(), documents.len());
        let adjacency = EdgeKind::ALL.map(|kind| {
            let (first, second) = kind.endpoints();
            let mut adj = Adjacency {
                from_first: vec![Vec::new(); level_len(counts, first)],
                from_second: vec![Vec::new(); level_len(counts, second)],
            };
            for &(a, b) in &edges[kind.slot()].pairs {
                if first == second {
                    adj.from_first[a].push(b);
                    adj.from_first[b].push(a);
                } else {
                    adj.from_first[a].push(b);
                    adj.from_second[b].push(a);
                }
            }
            for list in adj.from_first.iter_mut().chain(adj.from_second.iter_mut()) {
                list.sort_unstable();
            }
            adj
        });

        Ok(Self { entities, chunks, documents, triples, edges, adjacency, document_index, report })
    }

    pub fn edges(&self, kind: EdgeKind) -> &EdgeSet {
        &self.edges[kind.slot()]
    }

    pub fn level_size(&self, level: Level) -> usize {
        level_len((self.entities.len(), self.chunks.len(), self.documents.len()), level)
    }

    pub fn document_index(&self, doc_id: &str) -> Option<usize> {
        self.document_index.get(doc_id).copied()
    }

    /// Neighbor indices of `node` through edges of `kind`, ascending.
    /// Levels are implied: the other endpoint level of `kind`.
    pub fn neighbor_indices(&self, node: NodeRef, kind: EdgeKind) -> &[usize] {
        let (first, second) = kind.endpoints();
        let adj = &self.adjacency[kind.slot()];
        let list = if node.level == first {
            adj.from_first.get(node.index)
        } else if node.level == second {
            adj.from_second.get(node.index)
        } else {
            None
        };
        list.map(Vec::as_slice).unwrap_or(&[])
    }

    /// Neighbors of `node` through `kind` in ascending index order. Empty
    /// when `kind` does not touch the node's level.
    pub fn neighbors(&self, node: NodeRef, kind: EdgeKind) -> Vec<NodeRef> {
        let (first, second) = kind.endpoints();
        let other = if node.level == first { second } else { first };
        self.neighbor_indices(node, kind)
            .iter()
            .map(|&index| NodeRef { level: other, index })
            .collect()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.entities.len(),
            chunks: self.chunks.len(),
            documents: self.documents.len(),
            entity_entity: self.edges(EdgeKind::EntityEntity).len(),
            entity_chunk: self.edges(EdgeKind::EntityChunk).len(),
            entity_document: self.edges(EdgeKind::EntityDocument).len(),
            chunk_chunk: self.edges(EdgeKind::ChunkChunk).len(),
            chunk_document: self.edges(EdgeKind::ChunkDocument).len(),
        }
    }

    /// Checks the structural invariants of the graph; empty means sound.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let counts = (self.entities.len(), self.chunks.len(), self.documents.len());

        for kind in EdgeKind::ALL {
            let (first, second) = kind.endpoints();
            let mut seen = HashSet::new();
            for &(a, b) in &self.edges(kind).pairs {
                if a >= level_len(counts, first) || b >= level_len(counts, second) {
                    problems.push(format!("{kind} edge ({a}, {b}) has a dangling endpoint"));
                }
                if first == second && a == b {
                    problems.push(format!("{kind} edge ({a}, {b}) is a self pair"));
                }
                let key = if first == second { (a.min(b), a.max(b)) } else { (a, b) };
                if !seen.insert(key) {
                    problems.push(format!("{kind} edge ({a}, {b}) is duplicated"));
                }
            }
        }

        let mut cd_count = vec![0usize; self.chunks.len()];
        for &(c, d) in &self.edges(EdgeKind::ChunkDocument).pairs {
            if c < cd_count.len() {
                cd_count[c] += 1;
                if self.chunks[c].document != d {
                    problems.push(format!("chunk {c} linked to foreign document {d}"));
                }
            }
        }
        for (c, &n) in cd_count.iter().enumerate() {
            if n != 1 {
                problems.push(format!("chunk {c} has {n} chunk-document edges"));
            }
        }

        let mut per_doc: Vec<Vec<usize>> = vec![Vec::new(); self.documents.len()];
        for (i, c) in self.chunks.iter().enumerate() {
            per_doc[c.document].push(i);
        }
        let cc: HashSet<(usize, usize)> = self
            .edges(EdgeKind::ChunkChunk)
            .pairs
            .iter()
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        let mut path_edges = 0;
        for (d, members) in per_doc.iter_mut().enumerate() {
            members.sort_by_key(|&c| self.chunks[c].position);
            for w in members.windows(2) {
                path_edges += 1;
                if !cc.contains(&(w[0].min(w[1]), w[0].max(w[1]))) {
                    problems.push(format!("document {d}: chunks {} and {} are not linked", w[0], w[1]));
                }
            }
        }
        for &(a, b) in &cc {
            if self.chunks[a].document != self.chunks[b].document
                || self.chunks[a].position.abs_diff(self.chunks[b].position) != 1
            {
                problems.push(format!("chunk-chunk edge ({a}, {b}) does not join adjacent chunks"));
            }
        }
        if path_edges != cc.len() {
            problems.push(format!("expected {path_edges} chunk-chunk edges, found {}", cc.len()));
        }

        let od: HashSet<(usize, usize)> = self.edges(EdgeKind::EntityDocument).pairs.iter().copied().collect();
        let oc: HashSet<(usize, usize)> = self.edges(EdgeKind::EntityChunk).pairs.iter().copied().collect();
        for &(e, c) in &oc {
            if let Some(chunk) = self.chunks.get(c) {
                if !od.contains(&(e, chunk.document)) {
                    problems.push(format!("entity-chunk edge ({e}, {c}) lacks entity-document edge"));
                }
            }
        }
        for t in &self.triples {
            for e in [t.subject, t.object] {
                if !oc.contains(&(e, t.chunk)) || !od.contains(&(e, t.document)) {
                    problems.push(format!("entity {e} is not linked to its source chunk {}", t.chunk));
                }
            }
        }
        problems
    }

    /// Reconstructs the corpus records this graph was built from (triples
    /// rendered with normalized entity and predicate strings).
    pub fn to_bundle(&self) -> CorpusBundle {
        use crate::corpus::{ChunkRecord, DocumentRecord, TripleRecord};
        CorpusBundle {
            documents: self
                .documents
                .iter()
                .map(|d| DocumentRecord { doc_id: d.id.clone(), title: d.title.clone(), text: d.text.clone() })
                .collect(),
            chunks: self
                .chunks
                .iter()
                .map(|c| ChunkRecord {
                    chunk_id: c.id.clone(),
                    doc_id: self.documents[c.document].id.clone(),
                    position: c.position,
                    text: c.text.clone(),
                })
                .collect(),
            triples: self
                .triples
                .iter()
                .map(|t| TripleRecord {
                    subject: self.entities[t.subject].clone(),
                    predicate: t.predicate.clone(),
                    object: self.entities[t.object].clone(),
                    chunk_id: self.chunks[t.chunk].id.clone(),
                    doc_id: self.documents[t.document].id.clone(),
                })
                .collect(),
        }
    }
}

/// Line-delimited graph dump: the source corpus records followed by the
/// derived entity and edge records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum GraphRecord {
    Entity { index: usize, name: String },
    Edge { edge: EdgeKind, source: usize, target: usize, #[serde(default, skip_serializing_if = "Option::is_none")] attribute: Option<String> },
}

fn derived_records(g: &MultiLkg) -> Vec<GraphRecord> {
    let mut records: Vec<GraphRecord> = g
        .entities
        .iter()
        .enumerate()
        .map(|(index, name)| GraphRecord::Entity { index, name: name.clone() })
        .collect();
    for kind in EdgeKind::ALL {
        let set = g.edges(kind);
        for (&(source, target), attribute) in set.pairs.iter().zip(&set.attributes) {
            records.push(GraphRecord::Edge { edge: kind, source, target, attribute: attribute.clone() });
        }
    }
    records
}

pub fn write_graph<W: Write>(g: &MultiLkg, mut out: W) -> Result<()> {
    crate::corpus::write_corpus(&g.to_bundle(), &mut out)?;
    for record in derived_records(g) {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_graph(g: &MultiLkg, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_graph(g, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Loads a graph dump, rebuilding from the corpus records and checking that
/// the stored entity and edge records agree with the rebuild.
pub fn load_graph(path: impl AsRef<Path>) -> Result<MultiLkg> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut bundle = CorpusBundle::default();
    let mut derived = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("entity") | Some("edge") => derived.push(serde_json::from_value::<GraphRecord>(value).map_err(parse_err)?),
            _ => bundle.push(serde_json::from_value::<CorpusRecord>(value).map_err(parse_err)?),
        }
    }
    let g = MultiLkg::build(&bundle)?;
    if !derived.is_empty() && derived != derived_records(&g) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "stored entity/edge records disagree with the corpus records".into(),
        });
    }
    Ok(g)
}
