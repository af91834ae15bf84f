//! Contrastive training: hard negatives, the NT-Xent objective, and the
//! pre-train / fine-tune loops with checkpoint selection.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, EmbeddingSource};
use crate::error::{Error, Result};
use crate::grad::{backward, Adam, LossConfig, LossExample};
use crate::model::EncodedGraph;
use crate::params::{write_atomic, QsgnnParameters};
use crate::retrieval::recall_indices;
use crate::seeds::{substream, Stream};

/// One line of a training-examples file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    #[serde(alias = "query_text")]
    pub query: String,
    pub support_doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub negatives_k: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub checkpoint_every: usize,
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_mode(mode: Mode, seed: u64) -> Self {
        let (lr, max_epochs, checkpoint_every) = match mode {
            Mode::Pretrain => (1e-4, 5, 2000),
            Mode::Finetune => (5e-4, 3, 100),
        };
        Self { tau: 1.0, negatives_k: 30, lr, max_epochs, checkpoint_every, holdout_fraction: 0.05, batch_size: 32, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tau > 0.0) {
            bad.push(format!("tau must be positive, got {}", self.tau));
        }
        if self.negatives_k == 0 {
            bad.push("negatives_k must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            bad.push(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            bad.push("batch_size and checkpoint_every must be at least 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// The `k` non-support documents most similar to the query by raw cosine,
/// ties to the smaller document id. When fewer than `k` candidates exist,
/// all are taken and the rest drawn uniformly (with replacement) from them.
pub fn sample_hard_negatives(
    graph: &EncodedGraph,
    raw_query: &[f64],
    support: &[usize],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let support: HashSet<usize> = support.iter().copied().collect();
    let mut candidates: Vec<(usize, f64)> = (0..graph.plan.document_count)
        .filter(|d| !support.contains(d))
        .map(|d| (d, cosine(raw_query, graph.raw.documents.row(d).as_slice().expect("contiguous row"))))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Precondition("no non-support documents to draw negatives from".into()));
    }
    let ids = &graph.document_ids;
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0])));
    let mut picked: Vec<usize> = candidates.iter().take(k).map(|c| c.0).collect();
    while picked.len() < k {
        picked.push(candidates[rng.gen_range(0..candidates.len())].0);
    }
    Ok(picked)
}

/// `-log(e^{s+/τ} / (e^{s+/τ} + Σ e^{s-/τ}))` with cosine similarities.
pub fn nt_xent_loss(query: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {tau}")));
    }
    if negatives.is_empty() {
        return Err(Error::Precondition("at least one negative is required".into()));
    }
    let all = std::iter::once(&query).chain(std::iter::once(&positive)).chain(negatives.iter());
    if all.flat_map(|v| v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "loss input".into(), index: 0 });
    }
    let logits: Vec<f64> =
        std::iter::once(positive).chain(negatives.iter().copied()).map(|v| cosine(query, v) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok(total.ln() + max - logits[0])
}

fn doc_index(graph: &EncodedGraph, id: &str) -> Result<usize> {
    graph.document_ids.iter().position(|d| d == id).ok_or_else(|| Error::UnknownDocument(id.to_string()))
}

/// Embeds queries and resolves document ids. Examples without negatives get
/// `k` hard negatives.
pub fn prepare_examples(
    graph: &EncodedGraph,
    source: &EmbeddingSource,
    examples: &[TrainingExample],
    k: usize,
    seed: u64,
) -> Result<Vec<LossExample>> {
    let mut rng = substream(seed, Stream::Negatives);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            if ex.support_doc_ids.is_empty() {
                return Err(Error::Precondition(format!("training example {i} has no support documents")));
            }
            let query = source.embed(&ex.query)?;
            let mut positives = Vec::new();
            for id in &ex.support_doc_ids {
                let d = doc_index(graph, id)?;
                if !positives.contains(&d) {
                    positives.push(d);
                }
            }
            let negatives = if ex.negatives.is_empty() {
                sample_hard_negatives(graph, query.as_slice(), &positives, k, &mut rng)?
            } else {
                ex.negatives.iter().map(|id| doc_index(graph, id)).collect::<Result<Vec<_>>>()?
            };
            if let Some(d) = negatives.iter().find(|d| positives.contains(d)) {
                return Err(Error::Precondition(format!(
                    "training example {i} lists support document {} as a negative",
                    graph.document_ids[*d]
                )));
            }
            Ok(LossExample { query, positives, negatives })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub epoch: usize,
    pub holdout_recall_at_5: Option<f64>,
    pub params_sha256: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected checkpoint.
    pub params: QsgnnParameters,
    /// Parameters after the last step.
    pub last: QsgnnParameters,
    pub history: Vec<CheckpointRecord>,
    pub selected_step: usize,
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct CheckpointManifest<'a> {
    mode: Mode,
    config_sha256: String,
    config: &'a TrainConfig,
    history: &'a [CheckpointRecord],
    selected_step: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the training and model configuration.
pub fn config_hash(config: &TrainConfig, params: &QsgnnParameters) -> String {
    let text = format!("{}\n{}", serde_json::to_string(config).expect("plain struct"), serde_json::to_string(&params.config).expect("plain struct"));
    sha256_hex(text.as_bytes())
}

fn holdout_recall(params: &QsgnnParameters, graph: &EncodedGraph, holdout: &[LossExample]) -> Result<Option<f64>> {
    if holdout.is_empty() {
        return Ok(None);
    }
    use rayon::prelude::*;
    let recalls = holdout
        .par_iter()
        .map(|ex| recall_indices(params, graph, &ex.query, &ex.positives, &[5]).map(|r| r[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(recalls.iter().sum::<f64>() / recalls.len() as f64))
}

/// Runs the training loop on resolved examples. The examples are shuffled
/// with the run seed, the last `holdout_fraction` share is held out, and
/// the checkpoint with the best holdout recall@5 is selected (the latest one
/// on ties, the final one without a holdout). When `checkpoint_dir` is given
/// each checkpoint is written to `step-<N>/params` with a manifest.
pub fn train(
    mode: Mode,
    graph: &EncodedGraph,
    examples: &[LossExample],
    config: &TrainConfig,
    initial: QsgnnParameters,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Precondition("no training examples".into()));
    }
    let mut shuffle = substream(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut shuffle);
    let holdout_len = ((examples.len() as f64) * config.holdout_fraction).floor() as usize;
    let holdout_len = holdout_len.min(examples.len() - 1);
    let split = examples.len() - holdout_len;
    let train_set: Vec<LossExample> = order[..split].iter().map(|&i| examples[i].clone()).collect();
    let holdout: Vec<LossExample> = order[split..].iter().map(|&i| examples[i].clone()).collect();

    let loss_cfg = LossConfig::new(config.tau);
    let mut params = initial;
    let mut adam = Adam::new(config.lr, &params.tensors);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, QsgnnParameters)> = None;
    let mut epoch_losses = Vec::new();
    let mut warnings = Vec::new();
    let mut step = 0usize;
    let mut batch_order: Vec<usize> = (0..train_set.len()).collect();

    let mut checkpoint = |params: &QsgnnParameters, step: usize, epoch: usize, history: &mut Vec<CheckpointRecord>| -> Result<()> {
        let recall = holdout_recall(params, graph, &holdout)?;
        let text = params.to_text();
        if let Some(dir) = checkpoint_dir {
            write_atomic(&dir.join(format!("step-{step}")).join("params"), text.as_bytes())?;
        }
        history.push(CheckpointRecord { step, epoch, holdout_recall_at_5: recall, params_sha256: sha256_hex(text.as_bytes()) });
        let score = recall.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
            best = Some((score, step, params.clone()));
        }
        log::info!("checkpoint step {step} epoch {epoch} holdout recall@5 {recall:?}");
        Ok(())
    };

    for epoch in 0..config.max_epochs {
        batch_order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in batch_order.chunks(config.batch_size) {
            let batch: Vec<LossExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = backward(&params, graph, &batch, &loss_cfg)?;
            adam.step_params(&mut params, &grads)?;
            step += 1;
            total += loss;
            batches += 1;
            if step % config.checkpoint_every == 0 {
                checkpoint(&params, step, epoch, &mut history)?;
            }
        }
        let mean = total / batches as f64;
        log::debug!("{mode:?} epoch {epoch}: mean loss {mean:.6}");
        if let Some(&prev) = epoch_losses.last() {
            if mean >= prev {
                let msg = format!("epoch {epoch} mean loss {mean:.6} did not decrease from {prev:.6}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        epoch_losses.push(mean);
    }
    if history.last().is_none_or(|h| h.step != step) {
        checkpoint(&params, step, config.max_epochs.saturating_sub(1), &mut history)?;
    }
    let (_, selected_step, selected) = best.expect("at least one checkpoint");
    if let Some(dir) = checkpoint_dir {
        let manifest = CheckpointManifest {
            mode,
            config_sha256: config_hash(config, &params),
            config,
            history: &history,
            selected_step,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    }
    Ok(TrainOutcome { params: selected, last: params, history, selected_step, epoch_losses, warnings })
}

/// Directory holding the parameters of checkpoint `step`.
pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step}")).join("params")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChunkRecord, CorpusBundle, DocumentRecord};
    use crate::graph::MultiLkg;
    use crate::params::ModelConfig;

    fn corpus(texts: &[(&str, &str)]) -> (EncodedGraph, EmbeddingSource) {
        let mut b = CorpusBundle::default();
        for (d, t) in texts {
            b.documents.push(DocumentRecord { doc_id: d.to_string(), title: String::new(), text: t.to_string() });
            b.chunks.push(ChunkRecord { chunk_id: format!("{d}#0"), doc_id: d.to_string(), position: 0, text: t.to_string() });
        }
        let src = EmbeddingSource::hashed(5, 64).unwrap();
        (EncodedGraph::new(&MultiLkg::build(&b).unwrap(), &src).unwrap(), src)
    }

    #[test]
    fn loss_hand_values() {
        let l = nt_xent_loss(&[1.0, 0.0], &[2.0, 0.0], &[&[-1.0, 0.0]], 1.0).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.126928).abs() < 1e-6);
        let v = [0.3, 0.4];
        let u = nt_xent_loss(&[1.0, 1.0], &v, &[&v, &v, &v], 1.0).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12);
        assert!(nt_xent_loss(&[1.0], &[1.0], &[], 1.0).is_err());
        assert!(nt_xent_loss(&[1.0], &[1.0], &[&[1.0]], 0.0).is_err());
        assert!(nt_xent_loss(&[f64::NAN], &[1.0], &[&[1.0]], 1.0).is_err());
    }

    #[test]
    fn loss_decreases_with_positive_similarity() {
        let neg: &[f64] = &[0.0, 1.0];
        let at = |angle: f64| nt_xent_loss(&[1.0, 0.0], &[angle.cos(), angle.sin()], &[neg], 1.0).unwrap();
        assert!(at(1.2) > at(0.6) && at(0.6) > at(0.1));
    }

    #[test]
    fn large_temperature_flattens_loss() {
        let l = nt_xent_loss(&[1.0, 0.0], &[1.0, 0.0], &[&[-1.0, 0.0], &[0.0, 1.0]], 1e6).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn hard_negatives_rank_by_raw_cosine() {
        let (g, src) = corpus(&[("a", "alpha beta"), ("b", "gamma delta"), ("c", "alpha beta gamma"), ("d", "zeta")]);
        let q = src.embed("alpha beta gamma").unwrap();
        let mut rng = substream(1, Stream::Negatives);
        let negs = sample_hard_negatives(&g, q.as_slice(), &[0], 2, &mut rng).unwrap();
        assert_eq!(negs[0], 2);
        let all = sample_hard_negatives(&g, q.as_slice(), &[0], 3, &mut rng).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, [1, 2, 3]);
        let padded = sample_hard_negatives(&g, q.as_slice(), &[0, 1], 5, &mut rng).unwrap();
        assert_eq!(padded.len(), 5);
        assert!(padded.iter().all(|d| *d >= 2));
        assert!(sample_hard_negatives(&g, q.as_slice(), &[0, 1, 2, 3], 1, &mut rng).is_err());
    }

    #[test]
    fn support_never_sampled() {
        let texts: Vec<(String, String)> = (0..12).map(|i| (format!("d{i:02}"), format!("word{} word{}", i % 5, i % 3))).collect();
        let refs: Vec<(&str, &str)> = texts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let (g, src) = corpus(&refs);
        let mut rng = substream(3, Stream::Negatives);
        for t in 0..1000 {
            let support = [t % 12, (t * 7 + 1) % 12];
            let q = src.embed(&format!("word{} word{}", t % 5, t % 4)).unwrap();
            let negs = sample_hard_negatives(&g, q.as_slice(), &support, 1 + t % 14, &mut rng).unwrap();
            assert!(negs.iter().all(|n| !support.contains(n)));
        }
    }

    fn toy_run(lr: f64, seed: u64, dir: Option<&Path>) -> (QsgnnParameters, TrainOutcome) {
        let (g, src) = corpus(&[("a", "red fox"), ("b", "blue whale"), ("c", "green frog"), ("d", "grey wolf")]);
        let raw: Vec<TrainingExample> = [("fox", "a"), ("whale", "b"), ("frog", "c"), ("wolf", "d"), ("red", "a")]
            .iter()
            .map(|(q, d)| TrainingExample { query: q.to_string(), support_doc_ids: vec![d.to_string()], negatives: vec![] })
            .collect();
        let examples = prepare_examples(&g, &src, &raw, 2, seed).unwrap();
        let mut rng = substream(seed, Stream::Init);
        let init = QsgnnParameters::init(ModelConfig::new(64, 8, 1), &mut rng).unwrap();
        let mut cfg = TrainConfig::for_mode(Mode::Finetune, seed);
        cfg.lr = lr;
        cfg.batch_size = 2;
        cfg.checkpoint_every = 3;
        cfg.holdout_fraction = 0.2;
        cfg.negatives_k = 2;
        let out = train(Mode::Finetune, &g, &examples, &cfg, init.clone(), dir).unwrap();
        (init, out)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (init, out) = toy_run(0.0, 1, None);
        assert_eq!(out.last.tensors, init.tensors);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (_, a) = toy_run(5e-3, 2, Some(dir.path()));
        let (_, b) = toy_run(5e-3, 2, None);
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.tensors, b.last.tensors);
        // 4 training examples, batch 2, 3 epochs: 6 steps, checkpoints at 3 and 6.
        assert_eq!(a.history.iter().map(|h| h.step).collect::<Vec<_>>(), [3, 6]);
        assert!(a.history.iter().all(|h| h.holdout_recall_at_5.is_some()));
        let loaded = QsgnnParameters::load(checkpoint_path(dir.path(), 6), None).unwrap();
        assert_eq!(loaded.tensors, a.last.tensors);
        assert!(dir.path().join("manifest.json").exists());
        assert_eq!(a.epoch_losses.len(), 3);
    }

    #[test]
    fn holdout_examples_do_not_drive_updates() {
        let (g, src) = corpus(&[("a", "red fox"), ("b", "blue whale"), ("c", "green frog")]);
        let mk = |q: &str, d: &str| TrainingExample { query: q.into(), support_doc_ids: vec![d.into()], negatives: vec![] };
        let mut init_rng = substream(0, Stream::Init);
        let init = QsgnnParameters::init(ModelConfig::new(64, 4, 1), &mut init_rng).unwrap();
        let mut cfg = TrainConfig::for_mode(Mode::Finetune, 0);
        cfg.holdout_fraction = 0.4;
        cfg.max_epochs = 2;
        cfg.negatives_k = 1;
        let run = |ex: &[TrainingExample]| {
            let prepared = prepare_examples(&g, &src, ex, 1, 0).unwrap();
            train(Mode::Finetune, &g, &prepared, &cfg, init.clone(), None).unwrap()
        };
        let mut order: Vec<usize> = (0..3).collect();
        order.shuffle(&mut substream(0, Stream::Shuffle));
        let held = order[2];
        let mut ex = vec![mk("fox", "a"), mk("whale", "b"), mk("frog", "c")];
        let a = run(&ex);
        ex[held] = mk("something else entirely", "a");
        let b = run(&ex);
        assert_eq!(a.last.tensors, b.last.tensors);
        let trained = order[0];
        ex[trained] = mk("another query", "b");
        assert_ne!(run(&ex).last.tensors, a.last.tensors);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::for_mode(Mode::Pretrain, 0);
        assert_eq!((c.lr, c.max_epochs, c.checkpoint_every), (1e-4, 5, 2000));
        c.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::for_mode(Mode::Finetune, 0);
        c.holdout_fraction = 1.0;
        assert!(c.validate().is_err());
    }
}
