//! Gradients of the contrastive retrieval loss, the Adam optimizer, and a
//! central-difference gradient checker.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{ContrastiveTerm, Mat, Tape};
use crate::embed::RawEmbedding;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, BoundParams, EncodedGraph};
use crate::params::{first_non_finite, QsgnnParameters};

/// One query resolved against the graph: its raw embedding and the document
/// indices of its positives and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossExample {
    pub query: RawEmbedding,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    /// Multiplier applied to the batch loss (and hence its gradients).
    pub scale: f64,
}

impl LossConfig {
    pub fn new(tau: f64) -> Self {
        Self { tau, scale: 1.0 }
    }
}

/// One gradient tensor per parameter tensor, same order and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub tensors: Vec<Mat>,
}

impl GradientBundle {
    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn term_count(batch: &[LossExample]) -> usize {
    batch.iter().map(|e| e.positives.len()).sum()
}

fn check_batch(graph: &EncodedGraph, batch: &[LossExample], cfg: &LossConfig) -> Result<()> {
    if !(cfg.tau > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {}", cfg.tau)));
    }
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let docs = graph.plan.document_count;
    for (i, e) in batch.iter().enumerate() {
        if e.positives.is_empty() || e.negatives.is_empty() {
            return Err(Error::Precondition(format!("example {i} needs at least one positive and one negative")));
        }
        if let Some(&bad) = e.positives.iter().chain(&e.negatives).find(|&&d| d >= docs) {
            return Err(Error::Precondition(format!("example {i} references document {bad} of {docs}")));
        }
    }
    Ok(())
}

/// Per-example loss sum on a tape. Returns the tape, the bound parameters
/// and the loss node.
fn example_tape(
    params: &QsgnnParameters,
    graph: &EncodedGraph,
    example: &LossExample,
    tau: f64,
    trainable: bool,
) -> Result<(Tape, BoundParams, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let bound = if trainable { BoundParams::trainable(&mut tape, params) } else { BoundParams::frozen(&mut tape, params) };
    let out = forward_on_tape(&mut tape, params, &bound, &graph.plan, &graph.raw, example.query.as_slice())?;
    let picked: Vec<usize> = example.positives.iter().chain(&example.negatives).copied().collect();
    let docs = tape.gather(out.documents, picked.clone().into());
    let q = tape.gather(out.query, vec![0; picked.len()].into());
    let scores = tape.row_cosine(q, docs);
    let p = example.positives.len();
    let terms: Arc<[ContrastiveTerm]> = (0..p)
        .map(|i| ContrastiveTerm { positive: i, negatives: (p..picked.len()).collect() })
        .collect::<Vec<_>>()
        .into();
    let loss = tape.contrastive(scores, terms, tau);
    Ok((tape, bound, loss))
}

/// Mean contrastive loss over all (query, positive) terms of `batch`,
/// without gradients.
pub fn batch_loss(params: &QsgnnParameters, graph: &EncodedGraph, batch: &[LossExample], cfg: &LossConfig) -> Result<f64> {
    check_batch(graph, batch, cfg)?;
    let sums = batch
        .par_iter()
        .map(|e| example_tape(params, graph, e, cfg.tau, false).map(|(t, _, l)| t.value(l)[[0, 0]]))
        .collect::<Result<Vec<_>>>()?;
    Ok(cfg.scale * sums.iter().sum::<f64>() / term_count(batch) as f64)
}

/// Loss and exact gradients with respect to every parameter tensor.
/// Examples run in parallel; their contributions are summed in batch order.
pub fn backward(
    params: &QsgnnParameters,
    graph: &EncodedGraph,
    batch: &[LossExample],
    cfg: &LossConfig,
) -> Result<(f64, GradientBundle)> {
    check_batch(graph, batch, cfg)?;
    let weight = cfg.scale / term_count(batch) as f64;
    let parts = batch
        .par_iter()
        .map(|e| {
            let (tape, bound, loss) = example_tape(params, graph, e, cfg.tau, true)?;
            let value = tape.value(loss)[[0, 0]];
            let mut adj = tape.backward(loss, Mat::from_elem((1, 1), weight));
            let grads: Vec<Mat> = bound
                .0
                .iter()
                .zip(&params.tensors)
                .map(|(&v, t)| adj.take(v).unwrap_or_else(|| Mat::zeros(t.dim())))
                .collect();
            Ok((value, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = 0.0;
    let mut tensors = params.zeros_like();
    for (value, grads) in parts {
        total += value;
        for (acc, g) in tensors.iter_mut().zip(grads) {
            *acc += &g;
        }
    }
    let loss = total * weight;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "loss".into(), index: 0 });
    }
    if let Some((name, index)) = first_non_finite(&params.layout, &tensors) {
        return Err(Error::NonFinite { what: format!("gradient of {name}"), index });
    }
    Ok((loss, GradientBundle { tensors }))
}

/// Worst coordinate found by [`fd_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative error with a zero guard: when both values are below `1e-8` in
/// magnitude the error is 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic gradients with central differences
/// `(L(θ+εe) − L(θ−εe)) / 2ε` on up to `samples_per_tensor` randomly chosen
/// coordinates of every tensor.
pub fn fd_check(
    params: &QsgnnParameters,
    graph: &EncodedGraph,
    batch: &[LossExample],
    cfg: &LossConfig,
    eps: f64,
    samples_per_tensor: usize,
    rng: &mut impl Rng,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {eps}")));
    }
    let (_, grads) = backward(params, graph, batch, cfg)?;
    let mut report = FdReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (t, spec) in params.layout.specs.iter().enumerate() {
        let len = params.tensors[t].len();
        let picks: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(rng, len, samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for flat in picks {
            let cols = params.tensors[t].ncols();
            let at = [flat / cols, flat % cols];
            let original = params.tensors[t][at];
            probe.tensors[t][at] = original + eps;
            let plus = batch_loss(&probe, graph, batch, cfg)?;
            probe.tensors[t][at] = original - eps;
            let minus = batch_loss(&probe, graph, batch, cfg)?;
            probe.tensors[t][at] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.tensors[t][at];
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst_tensor.is_empty() {
                report = FdReport {
                    max_relative_error: err.max(report.max_relative_error),
                    worst_tensor: spec.name.clone(),
                    worst_index: flat,
                    analytic,
                    numeric,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, tensors: &[Mat]) -> Self {
        let zeros: Vec<Mat> = tensors.iter().map(|t| Mat::zeros(t.dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Applies one update in place.
    pub fn update(&mut self, tensors: &mut [Mat], grads: &[Mat]) -> Result<()> {
        if tensors.len() != self.first.len() || grads.len() != tensors.len() {
            return Err(Error::Shape("optimizer state, parameters and gradients differ in length".into()));
        }
        for (i, (t, g)) in tensors.iter().zip(grads).enumerate() {
            if t.dim() != g.dim() || t.dim() != self.first[i].dim() {
                return Err(Error::Shape(format!("tensor {i}: parameter {:?}, gradient {:?}", t.dim(), g.dim())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut updated: Vec<Mat> = Vec::with_capacity(tensors.len());
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let mut next = tensors[i].clone();
            ndarray::Zip::from(&mut next).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
            if let Some(k) = next.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { what: format!("updated tensor {i}"), index: k });
            }
            updated.push(next);
        }
        for (t, u) in tensors.iter_mut().zip(updated) {
            *t = u;
        }
        Ok(())
    }

    pub fn step_params(&mut self, params: &mut QsgnnParameters, grads: &GradientBundle) -> Result<()> {
        self.update(&mut params.tensors, &grads.tensors)
    }
}
