//! Template-based one-hop and two-hop question synthesis from graph triples.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSource;
use crate::error::Result;
use crate::graph::MultiLkg;
use crate::model::EncodedGraph;
use crate::retrieval::EvalExample;
use crate::seeds::{substream, Stream};
use crate::train::{sample_hard_negatives, TrainingExample};

pub const DEFAULT_CHAIN_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuestion {
    pub hop: usize,
    pub question_text: String,
    pub answer: String,
    pub support_doc_ids: Vec<String>,
    pub provenance: Vec<SourceTriple>,
}

impl SyntheticQuestion {
    pub fn to_eval_example(&self) -> EvalExample {
        EvalExample { query: self.question_text.clone(), gold_doc_ids: self.support_doc_ids.clone(), hop: Some(self.hop) }
    }
}

/// Distinct (subject, predicate, object, document) triples in first-appearance order.
pub fn distinct_triples(g: &MultiLkg) -> Vec<SourceTriple> {
    let mut seen = HashSet::new();
    g.triples
        .iter()
        .map(|t| SourceTriple {
            subject: g.entities[t.subject].clone(),
            predicate: t.predicate.clone(),
            object: g.entities[t.object].clone(),
            doc_id: g.documents[t.document].id.clone(),
        })
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

fn dedup(questions: Vec<SyntheticQuestion>) -> Vec<SyntheticQuestion> {
    let mut seen = HashSet::new();
    questions
        .into_iter()
        .filter(|q| seen.insert((q.question_text.clone(), q.answer.clone(), q.support_doc_ids.clone())))
        .collect()
}

/// Two questions per distinct triple before deduplication: the masked
/// subject and the masked object.
pub fn one_hop_candidates(g: &MultiLkg) -> Vec<SyntheticQuestion> {
    let mut out = Vec::new();
    for t in distinct_triples(g) {
        let support = vec![t.doc_id.clone()];
        out.push(SyntheticQuestion {
            hop: 1,
            question_text: format!("which entity {} {}?", t.predicate, t.object),
            answer: t.subject.clone(),
            support_doc_ids: support.clone(),
            provenance: vec![t.clone()],
        });
        out.push(SyntheticQuestion {
            hop: 1,
            question_text: format!("{} {} which entity?", t.subject, t.predicate),
            answer: t.object.clone(),
            support_doc_ids: support,
            provenance: vec![t],
        });
    }
    out
}

pub fn gen_one_hop(g: &MultiLkg) -> Vec<SyntheticQuestion> {
    dedup(one_hop_candidates(g))
}

/// Ordered chains `(first, second)` where the object of `first` is the
/// subject of `second` and the two come from different documents, grouped
/// by bridge entity. At most `cap` chains are kept per bridge, chosen with
/// the seed.
pub fn relation_chains(g: &MultiLkg, cap: Option<usize>, seed: u64) -> Vec<(SourceTriple, SourceTriple)> {
    let triples = distinct_triples(g);
    let mut by_subject: BTreeMap<&str, Vec<&SourceTriple>> = BTreeMap::new();
    for t in &triples {
        by_subject.entry(t.subject.as_str()).or_default().push(t);
    }
    let mut by_bridge: BTreeMap<&str, Vec<(SourceTriple, SourceTriple)>> = BTreeMap::new();
    for first in &triples {
        let Some(nexts) = by_subject.get(first.object.as_str()) else { continue };
        for second in nexts.iter().filter(|s| s.doc_id != first.doc_id) {
            by_bridge.entry(first.object.as_str()).or_default().push((first.clone(), (*second).clone()));
        }
    }
    let mut rng = substream(seed, Stream::Synth);
    let mut out = Vec::new();
    for (_, chains) in by_bridge {
        match cap {
            Some(c) if chains.len() > c => {
                let mut keep = sample(&mut rng, chains.len(), c).into_vec();
                keep.sort_unstable();
                out.extend(keep.into_iter().map(|i| chains[i].clone()));
            }
            _ => out.extend(chains),
        }
    }
    out
}

/// Two questions per chain: masked head subject and masked tail object,
/// both supported by the two source documents.
pub fn gen_two_hop(g: &MultiLkg, cap: Option<usize>, seed: u64) -> Vec<SyntheticQuestion> {
    let mut out = Vec::new();
    for (a, b) in relation_chains(g, cap, seed) {
        let support = vec![a.doc_id.clone(), b.doc_id.clone()];
        out.push(SyntheticQuestion {
            hop: 2,
            question_text: format!("which entity {} {} {} {}?", a.predicate, a.object, b.predicate, b.object),
            answer: a.subject.clone(),
            support_doc_ids: support.clone(),
            provenance: vec![a.clone(), b.clone()],
        });
        out.push(SyntheticQuestion {
            hop: 2,
            question_text: format!("{} {} {} {} which entity?", a.subject, a.predicate, a.object, b.predicate),
            answer: b.object.clone(),
            support_doc_ids: support,
            provenance: vec![a, b],
        });
    }
    dedup(out)
}

/// Attaches `k` hard negatives to every question and shuffles the result
/// with the seed.
pub fn emit_examples(
    questions: &[SyntheticQuestion],
    graph: &EncodedGraph,
    source: &EmbeddingSource,
    k: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let mut neg_rng = substream(seed, Stream::Negatives);
    let mut out = Vec::with_capacity(questions.len());
    for q in questions {
        let support: Vec<usize> = q
            .support_doc_ids
            .iter()
            .map(|id| {
                graph
                    .document_ids
                    .iter()
                    .position(|d| d == id)
                    .ok_or_else(|| crate::Error::UnknownDocument(id.clone()))
            })
            .collect::<Result<_>>()?;
        let raw = source.embed(&q.question_text)?;
        let negatives = sample_hard_negatives(graph, raw.as_slice(), &support, k, &mut neg_rng)?;
        out.push(TrainingExample {
            query: q.question_text.clone(),
            support_doc_ids: q.support_doc_ids.clone(),
            negatives: negatives.into_iter().map(|d| graph.document_ids[d].clone()).collect(),
        });
    }
    out.shuffle(&mut substream(seed, Stream::Shuffle));
    Ok(out)
}
