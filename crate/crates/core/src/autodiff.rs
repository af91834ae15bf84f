//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value and the operands it was computed from. [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Only the handful of
//! operations the graph network and its loss need are supported.
//!
//! Every reduction runs in a fixed order, so values and gradients are
//! bitwise reproducible for identical inputs.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Norms below this are treated as zero by [`Tape::row_cosine`].
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One contrastive term: the positive score index and its negatives, all
/// indexing rows of the score column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveTerm {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    RowCosine(Var, Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    ScaleRows(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Relu(Var),
    Contrastive { scores: Var, terms: Arc<[ContrastiveTerm]>, tau: f64 },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Mat>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

fn select_rows(m: &Mat, index: &[usize]) -> Mat {
    let cols = m.ncols();
    let Some(src) = m.as_slice() else { return m.select(Axis(0), index) };
    let mut out = Vec::with_capacity(index.len() * cols);
    for &r in index {
        out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    Mat::from_shape_vec((index.len(), cols), out).expect("rows x cols")
}

/// Row `k` of `m` summed into row `index[k]` of a `rows`-row result.
fn scatter_rows(m: &Mat, index: &[usize], rows: usize) -> Mat {
    let cols = m.ncols();
    let mut out = vec![0.0; rows * cols];
    for (k, &r) in index.iter().enumerate() {
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (d, s) in dst.iter_mut().zip(m.row(k)) {
            *d += s;
        }
    }
    Mat::from_shape_vec((rows, cols), out).expect("rows x cols")
}

/// Row `r` of `m` times `w[r, 0]`.
fn scale_by(m: &Mat, w: &Mat) -> Mat {
    let mut out = m.to_owned();
    for (mut row, &x) in out.outer_iter_mut().zip(w.column(0)) {
        row *= x;
    }
    out
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable input.
    pub fn parameter(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.grad_any(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.grad_any(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a` plus the single row `row`, broadcast down every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1-row operand");
        let value = self.value(a) + self.value(row);
        let ng = self.grad_any(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Rows of `a` picked by `index` (repeats allowed).
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>) -> Var {
        let value = select_rows(self.value(a), &index);
        let ng = self.grad_any(&[a]);
        self.push(value, Op::Gather(a, index), ng)
    }

    /// Sums row `k` of `a` into output row `index[k]`; output has `rows` rows.
    pub fn scatter_add(&mut self, a: Var, index: Arc<[usize]>, rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), index.len());
        let value = scatter_rows(src, &index, rows);
        let ng = self.grad_any(&[a]);
        self.push(value, Op::ScatterAdd(a, index), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concatenated blocks share column count");
        let ng = self.grad_any(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.grad_any(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Column of row-wise cosine similarities; zero when either row has a
    /// norm below [`COSINE_EPS`].
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "row_cosine operands differ in shape");
        let mut value = Mat::zeros((va.nrows(), 1));
        for (r, out) in value.iter_mut().enumerate() {
            *out = row_cos(va.row(r).as_slice().unwrap(), vb.row(r).as_slice().unwrap()).0;
        }
        let ng = self.grad_any(&[a, b]);
        self.push(value, Op::RowCosine(a, b), ng)
    }

    /// Softmax of a column within consecutive segments; segment `s` covers
    /// rows `offsets[s]..offsets[s + 1]`.
    pub fn segment_softmax(&mut self, x: Var, offsets: Arc<[usize]>) -> Var {
        let v = self.value(x);
        assert_eq!(v.ncols(), 1);
        assert_eq!(*offsets.last().unwrap_or(&0), v.nrows());
        let mut value = Mat::zeros(v.dim());
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let max = (lo..hi).map(|r| v[[r, 0]]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in lo..hi {
                let e = (v[[r, 0]] - max).exp();
                value[[r, 0]] = e;
                total += e;
            }
            for r in lo..hi {
                value[[r, 0]] /= total;
            }
        }
        let ng = self.grad_any(&[x]);
        self.push(value, Op::SegmentSoftmax(x, offsets), ng)
    }

    /// Row `r` of `a` multiplied by the scalar `weights[r, 0]`.
    pub fn scale_rows(&mut self, a: Var, weights: Var) -> Var {
        let w = self.value(weights);
        assert_eq!(w.dim(), (self.value(a).nrows(), 1));
        let value = scale_by(self.value(a), w);
        let ng = self.grad_any(&[a, weights]);
        self.push(value, Op::ScaleRows(a, weights), ng)
    }

    /// Per-row layer normalization with a learnable gain and bias (1-row).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = Mat::zeros(v.dim());
        for (r, row) in v.outer_iter().enumerate() {
            let (xhat, _) = normalize_row(row.as_slice().unwrap(), eps);
            for (c, xh) in xhat.into_iter().enumerate() {
                value[[r, c]] = g[[0, c]] * xh + b[[0, c]];
            }
        }
        let ng = self.grad_any(&[x, gain, bias]);
        self.push(value, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.grad_any(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    /// Sum over `terms` of `-log softmax_positive(scores / tau)`, where each
    /// softmax runs over the positive and its negatives. Output is 1x1.
    pub fn contrastive(&mut self, scores: Var, terms: Arc<[ContrastiveTerm]>, tau: f64) -> Var {
        let s = self.value(scores);
        let total: f64 = terms.iter().map(|t| term_loss(s, t, tau).0).sum();
        let ng = self.grad_any(&[scores]);
        self.push(Mat::from_elem((1, 1), total), Op::Contrastive { scores, terms, tau }, ng)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape).
    pub fn backward(&self, output: Var, seed: Mat) -> Adjoints {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let want = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if want(*a) {
                        accumulate(&mut grads[a.0], dy.dot(&self.value(*b).t()));
                    }
                    if want(*b) {
                        accumulate(&mut grads[b.0], self.value(*a).t().dot(&dy));
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                    if want(*b) {
                        accumulate(&mut grads[b.0], dy);
                    }
                }
                Op::AddRow(a, row) => {
                    if want(*row) {
                        let summed = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[row.0], summed);
                    }
                    if want(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Gather(a, index) => {
                    accumulate(&mut grads[a.0], scatter_rows(&dy, index, self.value(*a).nrows()));
                }
                Op::ScatterAdd(a, index) => {
                    accumulate(&mut grads[a.0], select_rows(&dy, index));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        if want(*p) {
                            accumulate(&mut grads[p.0], dy.slice(s![start..start + rows, ..]).to_owned());
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Mat::zeros(self.value(*a).dim());
                    g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    accumulate(&mut grads[a.0], g);
                }
                Op::RowCosine(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(va.dim());
                    let mut gb = Mat::zeros(vb.dim());
                    for r in 0..va.nrows() {
                        let (ra, rb) = (va.row(r), vb.row(r));
                        let (cos, norms) = row_cos(ra.as_slice().unwrap(), rb.as_slice().unwrap());
                        let Some((na, nb)) = norms else { continue };
                        let d = dy[[r, 0]];
                        for c in 0..va.ncols() {
                            ga[[r, c]] = d * (rb[c] / (na * nb) - cos * ra[c] / (na * na));
                            gb[[r, c]] = d * (ra[c] / (na * nb) - cos * rb[c] / (nb * nb));
                        }
                    }
                    if want(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if want(*b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::SegmentSoftmax(x, offsets) => {
                    let y = &node.value;
                    let mut g = Mat::zeros(y.dim());
                    for w in offsets.windows(2) {
                        let dot: f64 = (w[0]..w[1]).map(|r| y[[r, 0]] * dy[[r, 0]]).sum();
                        for r in w[0]..w[1] {
                            g[[r, 0]] = y[[r, 0]] * (dy[[r, 0]] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::ScaleRows(a, weights) => {
                    let va = self.value(*a);
                    let w = self.value(*weights);
                    if want(*weights) {
                        let mut gw = Mat::zeros(w.dim());
                        for r in 0..va.nrows() {
                            gw[[r, 0]] = va.row(r).dot(&dy.row(r));
                        }
                        accumulate(&mut grads[weights.0], gw);
                    }
                    if want(*a) {
                        accumulate(&mut grads[a.0], scale_by(&dy, w));
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let vx = self.value(*x);
                    let g = self.value(*gain);
                    let n = vx.ncols();
                    let mut gx = Mat::zeros(vx.dim());
                    let mut ggain = Mat::zeros((1, n));
                    let mut gbias = Mat::zeros((1, n));
                    for r in 0..vx.nrows() {
                        let (xhat, inv_std) = normalize_row(vx.row(r).as_slice().unwrap(), *eps);
                        let mut dxhat = vec![0.0; n];
                        for c in 0..n {
                            ggain[[0, c]] += dy[[r, c]] * xhat[c];
                            gbias[[0, c]] += dy[[r, c]];
                            dxhat[c] = dy[[r, c]] * g[[0, c]];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                        for c in 0..n {
                            gx[[r, c]] = inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    if want(*x) {
                        accumulate(&mut grads[x.0], gx);
                    }
                    if want(*gain) {
                        accumulate(&mut grads[gain.0], ggain);
                    }
                    if want(*bias) {
                        accumulate(&mut grads[bias.0], gbias);
                    }
                }
                Op::Relu(x) => {
                    let vx = self.value(*x);
                    let mut g = dy;
                    g.zip_mut_with(vx, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], g);
                }
                Op::Contrastive { scores, terms, tau } => {
                    let s = self.value(*scores);
                    let mut g = Mat::zeros(s.dim());
                    let d = dy[[0, 0]];
                    for t in terms.iter() {
                        let (_, probs) = term_loss(s, t, *tau);
                        g[[t.positive, 0]] += d * (probs[0] - 1.0) / tau;
                        for (&j, p) in t.negatives.iter().zip(&probs[1..]) {
                            g[[j, 0]] += d * p / tau;
                        }
                    }
                    accumulate(&mut grads[scores.0], g);
                }
            }
        }
        Adjoints { grads }
    }
}

/// Cosine and, when both norms are usable, the norms themselves.
fn row_cos(a: &[f64], b: &[f64]) -> (f64, Option<(f64, f64)>) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        return (0.0, None);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((dot / (na * nb)).clamp(-1.0, 1.0), Some((na, nb)))
}

fn normalize_row(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Loss of one term and the softmax over `[positive, negatives...]`.
fn term_loss(scores: &Mat, term: &ContrastiveTerm, tau: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = std::iter::once(term.positive)
        .chain(term.negatives.iter().copied())
        .map(|i| scores[[i, 0]] / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[0];
    (loss, exps.into_iter().map(|e| e / total).collect())
}
