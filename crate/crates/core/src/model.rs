//! The query-specific graph network.
//!
//! Each layer runs four attention blocks in order:
//!
//! 1. entities attend to entities over entity-entity edges;
//! 2. chunks attend to chunks over chunk-chunk edges;
//! 3. chunks attend to the (just updated) entities they mention;
//! 4. documents attend jointly to their entities and their (just updated)
//!    chunks.
//!
//! Every attention neighborhood includes the node itself. A block computes
//! `h' = MLP(LayerNorm(h + sum_j attn_j * h_j W_v))` where the attention
//! logits mix node-node cosine similarity (within a level) with the cosine
//! between the projected query and the projected node pair.

use std::sync::Arc;

use ndarray::Array1;

use crate::autodiff::{Mat, Tape, Var};
use crate::embed::{RawEmbedding, RawGraphEmbeddings};
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, Level, MultiLkg, NodeRef};
use crate::params::{InterIndex, IntraIndex, MlpIndex, NormIndex, QsgnnParameters};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention neighborhoods of one block in flat segment form. Segment `i`
/// (rows `offsets[i]..offsets[i + 1]`) lists the sources of target `i`,
/// itself first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    pub targets: Arc<[usize]>,
    pub sources: Arc<[usize]>,
    pub offsets: Arc<[usize]>,
    pub target_count: usize,
    broadcast: Arc<[usize]>,
}

impl Neighborhoods {
    fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        let mut offsets = vec![0];
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                targets.push(i);
                sources.push(j);
            }
            offsets.push(sources.len());
        }
        let broadcast = vec![0; sources.len()];
        Self {
            targets: targets.into(),
            sources: sources.into(),
            offsets: offsets.into(),
            target_count: lists.len(),
            broadcast: broadcast.into(),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.sources.len()
    }

    pub fn segment(&self, target: usize) -> std::ops::Range<usize> {
        self.offsets[target]..self.offsets[target + 1]
    }
}

/// Neighborhood structure for every block; sources of a cross-level block
/// index the stacked matrix `[targets; sources[0]; sources[1]; ...]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphPlan {
    pub entity_intra: Neighborhoods,
    pub chunk_intra: Neighborhoods,
    pub chunk_inter: Neighborhoods,
    pub document_inter: Neighborhoods,
    pub entity_count: usize,
    pub chunk_count: usize,
    pub document_count: usize,
}

impl GraphPlan {
    pub fn new(g: &MultiLkg) -> Self {
        let (ne, nc, nd) = (g.entities.len(), g.chunks.len(), g.documents.len());
        let intra = |level: Level, count: usize, kind: EdgeKind| {
            Neighborhoods::from_lists(
                (0..count)
                    .map(|i| {
                        let node = NodeRef { level, index: i };
                        std::iter::once(i).chain(g.neighbor_indices(node, kind).iter().copied()).collect()
                    })
                    .collect(),
            )
        };
        let chunk_inter = Neighborhoods::from_lists(
            (0..nc)
                .map(|i| {
                    std::iter::once(i)
                        .chain(g.neighbor_indices(NodeRef::chunk(i), EdgeKind::EntityChunk).iter().map(|&e| nc + e))
                        .collect()
                })
                .collect(),
        );
        let document_inter = Neighborhoods::from_lists(
            (0..nd)
                .map(|i| {
                    let d = NodeRef::document(i);
                    std::iter::once(i)
                        .chain(g.neighbor_indices(d, EdgeKind::EntityDocument).iter().map(|&e| nd + e))
                        .chain(g.neighbor_indices(d, EdgeKind::ChunkDocument).iter().map(|&c| nd + ne + c))
                        .collect()
                })
                .collect(),
        );
        Self {
            entity_intra: intra(Level::Entity, ne, EdgeKind::EntityEntity),
            chunk_intra: intra(Level::Chunk, nc, EdgeKind::ChunkChunk),
            chunk_inter,
            document_inter,
            entity_count: ne,
            chunk_count: nc,
            document_count: nd,
        }
    }
}

/// Node representations of every level.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub entities: Mat,
    pub chunks: Mat,
    pub documents: Mat,
}

impl NodeStates {
    pub fn level(&self, level: Level) -> &Mat {
        match level {
            Level::Entity => &self.entities,
            Level::Chunk => &self.chunks,
            Level::Document => &self.documents,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    EntityIntra,
    ChunkIntra,
    ChunkInter,
    DocumentInter,
}

/// Attention weights of one block, flat in [`Neighborhoods`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAttention {
    pub layer: usize,
    pub block: BlockKind,
    pub weights: Vec<f64>,
    pub offsets: Arc<[usize]>,
}

impl BlockAttention {
    pub fn row_sums(&self) -> Vec<f64> {
        self.offsets.windows(2).map(|w| self.weights[w[0]..w[1]].iter().sum()).collect()
    }
}

/// Parameters placed on a tape, aligned with `QsgnnParameters::tensors`.
#[derive(Debug, Clone)]
pub struct BoundParams(pub Vec<Var>);

impl BoundParams {
    pub fn trainable(tape: &mut Tape, params: &QsgnnParameters) -> Self {
        Self(params.tensors.iter().map(|t| tape.parameter(t.clone())).collect())
    }

    pub fn frozen(tape: &mut Tape, params: &QsgnnParameters) -> Self {
        Self(params.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    fn get(&self, slot: usize) -> Var {
        self.0[slot]
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct TapeStates {
    pub entities: Var,
    pub chunks: Var,
    pub documents: Var,
    pub query: Var,
    pub attention: Vec<(usize, BlockKind, Var)>,
}

fn check_finite(tape: &Tape, v: Var, what: impl Fn() -> String) -> Result<()> {
    let m = tape.value(v);
    for (r, row) in m.outer_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: what(), index: r });
        }
    }
    Ok(())
}

fn norm_mlp(tape: &mut Tape, p: &BoundParams, norm: &NormIndex, mlp: &MlpIndex, x: Var) -> Var {
    let normed = tape.layer_norm(x, p.get(norm.gain), p.get(norm.bias), LAYER_NORM_EPS);
    let hidden = tape.matmul(normed, p.get(mlp.hidden_weight));
    let hidden = tape.add_row(hidden, p.get(mlp.hidden_bias));
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, p.get(mlp.output_weight));
    tape.add_row(out, p.get(mlp.output_bias))
}

/// Projects `pair_left` rows (per target) and `pair_right` rows (per source)
/// through a split 2n x n key matrix and returns the cosine against the
/// broadcast query projection, one entry per neighborhood row.
#[allow(clippy::too_many_arguments)]
fn query_alignment(
    tape: &mut Tape,
    hood: &Neighborhoods,
    n: usize,
    query_proj: Var,
    key: Var,
    pair_left: Var,
    pair_right: Var,
) -> Var {
    let key_left = tape.slice_rows(key, 0, n);
    let key_right = tape.slice_rows(key, n, n);
    let left = tape.matmul(pair_left, key_left);
    let right = tape.matmul(pair_right, key_right);
    let left = tape.gather(left, hood.targets.clone());
    let right = tape.gather(right, hood.sources.clone());
    let keyed = tape.add(left, right);
    let q = tape.gather(query_proj, hood.broadcast.clone());
    tape.row_cosine(q, keyed)
}

fn aggregate(tape: &mut Tape, hood: &Neighborhoods, values: Var, attn: Var) -> Var {
    let picked = tape.gather(values, hood.sources.clone());
    let weighted = tape.scale_rows(picked, attn);
    tape.scatter_add(weighted, hood.targets.clone(), hood.target_count)
}

/// Within-level attention block. Returns the updated level matrix and the
/// attention column.
pub fn intra_block_on_tape(
    tape: &mut Tape,
    params: &QsgnnParameters,
    bound: &BoundParams,
    index: &IntraIndex,
    query: Var,
    states: Var,
    hood: &Neighborhoods,
) -> (Var, Var) {
    let n = params.config.hidden_dim;
    let qa = tape.matmul(states, bound.get(index.query_alpha));
    let ka = tape.matmul(states, bound.get(index.key_alpha));
    let qa = tape.gather(qa, hood.targets.clone());
    let ka = tape.gather(ka, hood.sources.clone());
    let mut logits = tape.row_cosine(qa, ka);
    if params.config.query_attention {
        let qb = tape.matmul(query, bound.get(index.query_beta));
        let beta = query_alignment(tape, hood, n, qb, bound.get(index.key_beta), states, states);
        logits = tape.add(logits, beta);
    }
    let attn = tape.segment_softmax(logits, hood.offsets.clone());
    let values = tape.matmul(states, bound.get(index.value));
    let msg = aggregate(tape, hood, values, attn);
    let residual = tape.add(states, msg);
    (norm_mlp(tape, bound, &index.norm, &index.mlp, residual), attn)
}

/// Cross-level attention block updating `target` from `sources`, whose rows
/// are addressed through the stacked indexing of [`GraphPlan`].
#[allow(clippy::too_many_arguments)]
pub fn inter_block_on_tape(
    tape: &mut Tape,
    params: &QsgnnParameters,
    bound: &BoundParams,
    index: &InterIndex,
    query: Var,
    target: Var,
    sources: &[Var],
    hood: &Neighborhoods,
) -> (Var, Var) {
    assert_eq!(sources.len(), index.sources.len());
    let n = params.config.hidden_dim;
    let stacked: Vec<Var> = std::iter::once(target).chain(sources.iter().copied()).collect();
    let stacked = tape.concat_rows(&stacked);
    let logits = if params.config.query_attention {
        let proj_target = tape.matmul(target, bound.get(index.target));
        let mut projected = vec![proj_target];
        for (&src, &w) in sources.iter().zip(&index.sources) {
            projected.push(tape.matmul(src, bound.get(w)));
        }
        let proj_stacked = tape.concat_rows(&projected);
        let qg = tape.matmul(query, bound.get(index.query_gamma));
        query_alignment(tape, hood, n, qg, bound.get(index.key_gamma), proj_target, proj_stacked)
    } else {
        tape.constant(Mat::zeros((hood.edge_count(), 1)))
    };
    let attn = tape.segment_softmax(logits, hood.offsets.clone());
    let values = tape.matmul(stacked, bound.get(index.value));
    let msg = aggregate(tape, hood, values, attn);
    let residual = tape.add(target, msg);
    (norm_mlp(tape, bound, &index.norm, &index.mlp, residual), attn)
}

/// Places raw inputs on the tape and applies the input bottleneck.
pub fn project_on_tape(
    tape: &mut Tape,
    params: &QsgnnParameters,
    bound: &BoundParams,
    raw: &RawGraphEmbeddings,
    raw_query: &[f64],
) -> Result<(Var, Var, Var, Var)> {
    let d = params.config.input_dim;
    if raw.dim() != d || raw_query.len() != d {
        return Err(Error::Shape(format!(
            "raw embeddings have dimension {} (query {}), model expects {d}",
            raw.dim(),
            raw_query.len()
        )));
    }
    let w = bound.get(params.layout.input);
    let mut project = |m: &Mat| {
        let c = tape.constant(m.clone());
        tape.matmul(c, w)
    };
    let e = project(&raw.entities);
    let c = project(&raw.chunks);
    let doc = project(&raw.documents);
    let q = project(&Mat::from_shape_vec((1, d), raw_query.to_vec()).expect("1 x d"));
    Ok((e, c, doc, q))
}

/// Full forward pass on a tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &QsgnnParameters,
    bound: &BoundParams,
    plan: &GraphPlan,
    raw: &RawGraphEmbeddings,
    raw_query: &[f64],
) -> Result<TapeStates> {
    let (mut ent, mut chunk, mut doc, query) = project_on_tape(tape, params, bound, raw, raw_query)?;
    let mut attention = Vec::new();
    for (l, layer) in params.layout.layers.iter().enumerate() {
        let (e, a) = intra_block_on_tape(tape, params, bound, &layer.intra_entity, query, ent, &plan.entity_intra);
        check_finite(tape, e, || format!("layer {l} entity intra block"))?;
        attention.push((l, BlockKind::EntityIntra, a));
        ent = e;

        let (c, a) = intra_block_on_tape(tape, params, bound, &layer.intra_chunk, query, chunk, &plan.chunk_intra);
        check_finite(tape, c, || format!("layer {l} chunk intra block"))?;
        attention.push((l, BlockKind::ChunkIntra, a));
        chunk = c;

        let (c, a) = inter_block_on_tape(tape, params, bound, &layer.inter_chunk, query, chunk, &[ent], &plan.chunk_inter);
        check_finite(tape, c, || format!("layer {l} chunk inter block"))?;
        attention.push((l, BlockKind::ChunkInter, a));
        chunk = c;

        let (d, a) = inter_block_on_tape(
            tape,
            params,
            bound,
            &layer.inter_document,
            query,
            doc,
            &[ent, chunk],
            &plan.document_inter,
        );
        check_finite(tape, d, || format!("layer {l} document inter block"))?;
        attention.push((l, BlockKind::DocumentInter, a));
        doc = d;
    }
    Ok(TapeStates { entities: ent, chunks: chunk, documents: doc, query, attention })
}

/// Graph structure and raw node embeddings, ready for forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGraph {
    pub plan: GraphPlan,
    pub raw: RawGraphEmbeddings,
    pub document_ids: Vec<String>,
}

impl EncodedGraph {
    pub fn new(g: &MultiLkg, source: &crate::embed::EmbeddingSource) -> Result<Self> {
        Ok(Self::from_parts(g, crate::embed::embed_graph(source, g)?))
    }

    pub fn from_parts(g: &MultiLkg, raw: RawGraphEmbeddings) -> Self {
        Self { plan: GraphPlan::new(g), raw, document_ids: g.documents.iter().map(|d| d.id.clone()).collect() }
    }
}

/// Result of a forward pass without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub states: NodeStates,
    pub query: Array1<f64>,
    pub attention: Vec<BlockAttention>,
}

fn plan_for(plan: &GraphPlan, block: BlockKind) -> &Neighborhoods {
    match block {
        BlockKind::EntityIntra => &plan.entity_intra,
        BlockKind::ChunkIntra => &plan.chunk_intra,
        BlockKind::ChunkInter => &plan.chunk_inter,
        BlockKind::DocumentInter => &plan.document_inter,
    }
}

pub fn forward(
    params: &QsgnnParameters,
    plan: &GraphPlan,
    raw: &RawGraphEmbeddings,
    raw_query: &RawEmbedding,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = BoundParams::frozen(&mut tape, params);
    let out = forward_on_tape(&mut tape, params, &bound, plan, raw, raw_query.as_slice())?;
    Ok(ForwardOutput {
        states: NodeStates {
            entities: tape.value(out.entities).clone(),
            chunks: tape.value(out.chunks).clone(),
            documents: tape.value(out.documents).clone(),
        },
        query: tape.value(out.query).row(0).to_owned(),
        attention: out
            .attention
            .iter()
            .map(|&(layer, block, v)| BlockAttention {
                layer,
                block,
                weights: tape.value(v).column(0).to_vec(),
                offsets: plan_for(plan, block).offsets.clone(),
            })
            .collect(),
    })
}

/// Bottleneck projection of raw node matrices and the raw query.
pub fn project_inputs(
    params: &QsgnnParameters,
    raw: &RawGraphEmbeddings,
    raw_query: &[f64],
) -> Result<(NodeStates, Array1<f64>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::frozen(&mut tape, params);
    let (e, c, d, q) = project_on_tape(&mut tape, params, &bound, raw, raw_query)?;
    Ok((
        NodeStates { entities: tape.value(e).clone(), chunks: tape.value(c).clone(), documents: tape.value(d).clone() },
        tape.value(q).row(0).to_owned(),
    ))
}

/// Which within-level block to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraLevel {
    Entity,
    Chunk,
}

/// Which cross-level block to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterTarget {
    Chunk,
    Document,
}

/// Output of a single block: the updated target level and its attention.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub updated: Mat,
    pub attention: BlockAttention,
}

fn check_layer(params: &QsgnnParameters, layer: usize) -> Result<()> {
    if layer >= params.layout.layers.len() {
        return Err(Error::Precondition(format!("layer {layer} out of range for {} layers", params.layout.layers.len())));
    }
    Ok(())
}

/// Runs one within-level block of `layer` on explicit states.
pub fn intra_block(
    params: &QsgnnParameters,
    layer: usize,
    level: IntraLevel,
    query: &Array1<f64>,
    states: &NodeStates,
    plan: &GraphPlan,
) -> Result<BlockOutput> {
    check_layer(params, layer)?;
    let mut tape = Tape::new();
    let bound = BoundParams::frozen(&mut tape, params);
    let q = tape.constant(query.clone().insert_axis(ndarray::Axis(0)));
    let (index, h, hood, block) = match level {
        IntraLevel::Entity => (&params.layout.layers[layer].intra_entity, &states.entities, &plan.entity_intra, BlockKind::EntityIntra),
        IntraLevel::Chunk => (&params.layout.layers[layer].intra_chunk, &states.chunks, &plan.chunk_intra, BlockKind::ChunkIntra),
    };
    let h = tape.constant(h.clone());
    let (out, attn) = intra_block_on_tape(&mut tape, params, &bound, index, q, h, hood);
    check_finite(&tape, out, || format!("layer {layer} {level:?} intra block"))?;
    Ok(BlockOutput {
        updated: tape.value(out).clone(),
        attention: BlockAttention { layer, block, weights: tape.value(attn).column(0).to_vec(), offsets: hood.offsets.clone() },
    })
}

/// Runs one cross-level block of `layer` on explicit states.
pub fn inter_block(
    params: &QsgnnParameters,
    layer: usize,
    target: InterTarget,
    query: &Array1<f64>,
    states: &NodeStates,
    plan: &GraphPlan,
) -> Result<BlockOutput> {
    check_layer(params, layer)?;
    let mut tape = Tape::new();
    let bound = BoundParams::frozen(&mut tape, params);
    let q = tape.constant(query.clone().insert_axis(ndarray::Axis(0)));
    let ent = tape.constant(states.entities.clone());
    let chunk = tape.constant(states.chunks.clone());
    let (out, attn, hood, block) = match target {
        InterTarget::Chunk => {
            let index = &params.layout.layers[layer].inter_chunk;
            let (o, a) = inter_block_on_tape(&mut tape, params, &bound, index, q, chunk, &[ent], &plan.chunk_inter);
            (o, a, &plan.chunk_inter, BlockKind::ChunkInter)
        }
        InterTarget::Document => {
            let doc = tape.constant(states.documents.clone());
            let index = &params.layout.layers[layer].inter_document;
            let (o, a) = inter_block_on_tape(&mut tape, params, &bound, index, q, doc, &[ent, chunk], &plan.document_inter);
            (o, a, &plan.document_inter, BlockKind::DocumentInter)
        }
    };
    check_finite(&tape, out, || format!("layer {layer} {target:?} inter block"))?;
    Ok(BlockOutput {
        updated: tape.value(out).clone(),
        attention: BlockAttention { layer, block, weights: tape.value(attn).column(0).to_vec(), offsets: hood.offsets.clone() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChunkRecord, CorpusBundle, DocumentRecord, TripleRecord};
    use crate::embed::{embed_graph, EmbeddingSource};
    use crate::params::ModelConfig;
    use rand::SeedableRng;

    fn toy_graph() -> MultiLkg {
        let mut b = CorpusBundle::default();
        for (d, m) in [("d0", 3usize), ("d1", 2)] {
            b.documents.push(DocumentRecord { doc_id: d.into(), title: d.into(), text: format!("words about {d}") });
            for p in 0..m {
                b.chunks.push(ChunkRecord { chunk_id: format!("{d}#{p}"), doc_id: d.into(), position: p, text: format!("{d} sentence {p} text") });
            }
        }
        for (s, r, o, d, p) in [("alpha", "likes", "beta", "d0", 0), ("beta", "owns", "gamma", "d1", 1), ("gamma", "is", "delta", "d0", 2)] {
            b.triples.push(TripleRecord { subject: s.into(), predicate: r.into(), object: o.into(), chunk_id: format!("{d}#{p}"), doc_id: d.into() });
        }
        MultiLkg::build(&b).unwrap()
    }

    fn setup(layers: usize) -> (MultiLkg, GraphPlan, RawGraphEmbeddings, QsgnnParameters, EmbeddingSource) {
        let g = toy_graph();
        let src = EmbeddingSource::hashed(5, 16).unwrap();
        let raw = embed_graph(&src, &g).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let params = QsgnnParameters::init(ModelConfig::new(16, 6, layers), &mut rng).unwrap();
        (g.clone(), GraphPlan::new(&g), raw, params, src)
    }

    #[test]
    fn plan_puts_self_first() {
        let (g, plan, ..) = setup(1);
        for i in 0..g.chunks.len() {
            assert_eq!(plan.chunk_intra.sources[plan.chunk_intra.segment(i).start], i);
        }
        // document 0 has 4 entities (alpha, beta, gamma, delta) and 3 chunks
        assert_eq!(plan.document_inter.segment(0).len(), 1 + 4 + 3);
    }

    #[test]
    fn zero_layers_is_projection() {
        let (_, plan, raw, params, src) = setup(0);
        let q = src.embed("alpha beta").unwrap();
        let out = forward(&params, &plan, &raw, &q).unwrap();
        let (h0, q0) = project_inputs(&params, &raw, q.as_slice()).unwrap();
        assert_eq!(out.states, h0);
        assert_eq!(out.query, q0);
    }

    #[test]
    fn zero_input_projection_gives_zero_states() {
        let (_, _, raw, params, src) = setup(1);
        let zero = QsgnnParameters::zeros(params.config).unwrap();
        let (h0, q0) = project_inputs(&zero, &raw, src.embed("x").unwrap().as_slice()).unwrap();
        assert!(h0.entities.iter().chain(&h0.chunks).chain(&h0.documents).all(|&v| v == 0.0));
        assert!(q0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (_, plan, raw, params, src) = setup(2);
        let out = forward(&params, &plan, &raw, &src.embed("gamma owns").unwrap()).unwrap();
        assert_eq!(out.attention.len(), 8);
        for a in &out.attention {
            for s in a.row_sums() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let (_, plan, raw, params, src) = setup(2);
        let q = src.embed("alpha likes").unwrap();
        let a = forward(&params, &plan, &raw, &q).unwrap();
        let b = forward(&params, &plan, &raw, &q).unwrap();
        assert!(a.states.documents.iter().zip(&b.states.documents).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn distinct_queries_change_documents() {
        let (_, plan, raw, params, src) = setup(2);
        let a = forward(&params, &plan, &raw, &src.embed("alpha likes beta").unwrap()).unwrap();
        let b = forward(&params, &plan, &raw, &src.embed("zzz qqq").unwrap()).unwrap();
        let diff = (&a.states.documents - &b.states.documents).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn zero_weights_give_uniform_cross_attention() {
        let (_, plan, raw, params, src) = setup(1);
        let zero = QsgnnParameters::zeros(params.config).unwrap();
        let (h0, q0) = project_inputs(&params, &raw, src.embed("x").unwrap().as_slice()).unwrap();
        let out = inter_block(&zero, 0, InterTarget::Document, &q0, &h0, &plan).unwrap();
        for w in out.attention.offsets.windows(2) {
            let k = (w[1] - w[0]) as f64;
            for &a in &out.attention.weights[w[0]..w[1]] {
                assert!((a - 1.0 / k).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_blocks_match_forward_composition() {
        let (_, plan, raw, params, src) = setup(1);
        let q = src.embed("beta owns gamma").unwrap();
        let (h0, q0) = project_inputs(&params, &raw, q.as_slice()).unwrap();
        let mut s = h0.clone();
        s.entities = intra_block(&params, 0, IntraLevel::Entity, &q0, &s, &plan).unwrap().updated;
        s.chunks = intra_block(&params, 0, IntraLevel::Chunk, &q0, &s, &plan).unwrap().updated;
        s.chunks = inter_block(&params, 0, InterTarget::Chunk, &q0, &s, &plan).unwrap().updated;
        s.documents = inter_block(&params, 0, InterTarget::Document, &q0, &s, &plan).unwrap().updated;
        let full = forward(&params, &plan, &raw, &q).unwrap();
        assert_eq!(full.states, s);
    }

    #[test]
    fn layer_out_of_range() {
        let (_, plan, raw, params, src) = setup(1);
        let (h0, q0) = project_inputs(&params, &raw, src.embed("x").unwrap().as_slice()).unwrap();
        assert!(intra_block(&params, 1, IntraLevel::Entity, &q0, &h0, &plan).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (_, _, raw, params, _) = setup(1);
        assert!(matches!(project_inputs(&params, &raw, &[0.0; 3]), Err(Error::Shape(_))));
    }
}
