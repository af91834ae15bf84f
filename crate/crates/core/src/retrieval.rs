//! Document scoring, top-k ranking and recall metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbeddingSource, RawEmbedding};
use crate::error::{Error, Result};
use crate::model::{forward, EncodedGraph};
use crate::params::QsgnnParameters;

/// Cosine between the final query vector and every document row of the
/// last layer, in document index order.
pub fn score_documents(params: &QsgnnParameters, graph: &EncodedGraph, query: &RawEmbedding) -> Result<Vec<f64>> {
    let out = forward(params, &graph.plan, &graph.raw, query)?;
    let q = out.query.as_slice().expect("contiguous query");
    Ok(out.states.documents.outer_iter().map(|row| cosine(q, row.as_slice().expect("contiguous row"))).collect())
}

/// Cosine between the final query vector and every chunk row.
pub fn score_chunks(params: &QsgnnParameters, graph: &EncodedGraph, query: &RawEmbedding) -> Result<Vec<f64>> {
    let out = forward(params, &graph.plan, &graph.raw, query)?;
    let q = out.query.as_slice().expect("contiguous query");
    Ok(out.states.chunks.outer_iter().map(|row| cosine(q, row.as_slice().expect("contiguous row"))).collect())
}

pub fn score_text(
    params: &QsgnnParameters,
    graph: &EncodedGraph,
    query: &str,
    source: &EmbeddingSource,
) -> Result<Vec<f64>> {
    score_documents(params, graph, &source.embed(query)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<(String, f64)>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(id, _)| id.as_str())
    }
}

/// Positions of the `k` highest scores; ties go to the smaller id.
pub fn rank_indices(ids: &[String], scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order.truncate(k);
    order
}

pub fn top_k(ids: &[String], scores: &[f64], k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    if ids.len() != scores.len() {
        return Err(Error::Shape(format!("{} ids for {} scores", ids.len(), scores.len())));
    }
    let ranked = rank_indices(ids, scores, k).into_iter().map(|i| (ids[i].clone(), scores[i])).collect();
    Ok(RetrievalResult { ranked, k })
}

/// `|top-k ∩ gold| / |gold|`, with `gold` taken as a set.
pub fn recall_at_k(result: &RetrievalResult, gold: &[String], k: usize) -> Result<f64> {
    let gold: HashSet<&str> = gold.iter().map(String::as_str).collect();
    if gold.is_empty() {
        return Err(Error::Precondition("recall needs a non-empty gold set".into()));
    }
    let hits = result.ids().take(k).filter(|id| gold.contains(id)).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Recall for a query given as a raw embedding and gold document indices.
pub fn recall_indices(
    params: &QsgnnParameters,
    graph: &EncodedGraph,
    query: &RawEmbedding,
    gold: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if gold.is_empty() {
        return Err(Error::Precondition("recall needs a non-empty gold set".into()));
    }
    let scores = score_documents(params, graph, query)?;
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let ranked = rank_indices(&graph.document_ids, &scores, max_k);
    let gold: HashSet<usize> = gold.iter().copied().collect();
    Ok(ks
        .iter()
        .map(|&k| ranked.iter().take(k).filter(|i| gold.contains(i)).count() as f64 / gold.len() as f64)
        .collect())
}

/// One line of an evaluation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub query: String,
    pub gold_doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop: Option<usize>,
}

impl EvalExample {
    /// Bucket key: the declared hop count, else the gold set size.
    pub fn hop_key(&self) -> usize {
        self.hop.unwrap_or_else(|| self.gold_doc_ids.iter().collect::<HashSet<_>>().len())
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub hop: usize,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopBucket {
    pub count: usize,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: Vec<QueryMetrics>,
    pub count: usize,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
    pub by_hop: BTreeMap<usize, HopBucket>,
}

fn mean(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n, if n == 0 { 0.0 } else { s / n as f64 })
}

impl EvalReport {
    /// Aggregates per-query metrics. Entries are put in a canonical order
    /// first so the report does not depend on input order.
    pub fn from_queries(mut queries: Vec<QueryMetrics>) -> Self {
        queries.sort_by(|a, b| {
            a.query
                .cmp(&b.query)
                .then(a.hop.cmp(&b.hop))
                .then(a.recall_at_2.total_cmp(&b.recall_at_2))
                .then(a.recall_at_5.total_cmp(&b.recall_at_5))
        });
        let (count, recall_at_2) = mean(queries.iter().map(|q| q.recall_at_2));
        let (_, recall_at_5) = mean(queries.iter().map(|q| q.recall_at_5));
        let mut by_hop = BTreeMap::new();
        let hops: std::collections::BTreeSet<usize> = queries.iter().map(|q| q.hop).collect();
        for hop in hops {
            let bucket = || queries.iter().filter(move |q| q.hop == hop);
            let (count, r2) = mean(bucket().map(|q| q.recall_at_2));
            let (_, r5) = mean(bucket().map(|q| q.recall_at_5));
            by_hop.insert(hop, HopBucket { count, recall_at_2: r2, recall_at_5: r5 });
        }
        Self { queries, count, recall_at_2, recall_at_5, by_hop }
    }

    /// Aggregate record as one JSON line (per-query rows omitted).
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "count": self.count,
            "recall_at_2": self.recall_at_2,
            "recall_at_5": self.recall_at_5,
            "by_hop": self.by_hop,
        })
        .to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>7} {:>9} {:>9}", "hop", "queries", "recall@2", "recall@5")?;
        for (hop, b) in &self.by_hop {
            writeln!(f, "{:<8} {:>7} {:>9.4} {:>9.4}", hop, b.count, b.recall_at_2, b.recall_at_5)?;
        }
        write!(f, "{:<8} {:>7} {:>9.4} {:>9.4}", "all", self.count, self.recall_at_2, self.recall_at_5)
    }
}

/// Recall@2 and recall@5 for every example, computed in parallel.
pub fn evaluate(
    params: &QsgnnParameters,
    graph: &EncodedGraph,
    examples: &[EvalExample],
    source: &EmbeddingSource,
) -> Result<EvalReport> {
    let queries = examples
        .par_iter()
        .map(|ex| {
            let gold = ex
                .gold_doc_ids
                .iter()
                .map(|id| {
                    graph.document_ids.iter().position(|d| d == id).ok_or_else(|| Error::UnknownDocument(id.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let r = recall_indices(params, graph, &source.embed(&ex.query)?, &gold, &[2, 5])?;
            Ok(QueryMetrics { query: ex.query.clone(), hop: ex.hop_key(), recall_at_2: r[0], recall_at_5: r[1] })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_queries(queries))
}
