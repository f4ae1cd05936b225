//! Forward pass of the one-layer transformer and its cross-entropy loss.
//!
//! Attention uses only the last-token query:
//! `alpha = softmax(X^T Z X[-1] / sqrt(d))` and `x_a = X alpha + X[-1]`.
//! The MLP has `m` neurons per output class and a fixed read-out that
//! averages them, so output `i` is `(lambda/m) * sum_k relu(<w_{i,k}, x_a>)`.
//!
//! `W` is stored column-major. Inputs are kept as sparse columns, which makes
//! `W x` a handful of contiguous column sweeps for basis-vector tokens.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ShapeBuilder};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, EmbeddingTable, Example, TokenId};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// A sparse d-dimensional column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * dense[i]).sum()
    }
}

/// A `d x L` input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    dim: usize,
    cols: Vec<SparseVec>,
}

impl Sequence {
    pub fn new(dim: usize) -> Self {
        Self { dim, cols: Vec::new() }
    }

    /// Builds a sequence from a dense `d x L` matrix (one column per token).
    pub fn from_dense(x: &Array2<f64>) -> Self {
        let mut seq = Self::new(x.nrows());
        for col in x.columns() {
            seq.push_dense(col);
        }
        seq
    }

    pub fn push_dense(&mut self, col: ArrayView1<'_, f64>) {
        assert_eq!(col.len(), self.dim, "column length must equal the embedding dimension");
        let (idx, val) = col
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        self.cols.push(SparseVec { idx, val });
    }

    pub fn push_sparse(&mut self, idx: Vec<usize>, val: Vec<f64>) {
        assert_eq!(idx.len(), val.len());
        assert!(idx.iter().all(|&i| i < self.dim));
        self.cols.push(SparseVec { idx, val });
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn cols(&self) -> &[SparseVec] {
        &self.cols
    }

    pub fn last(&self) -> &SparseVec {
        self.cols.last().expect("sequence must be non-empty")
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.dim, self.cols.len()));
        for (l, c) in self.cols.iter().enumerate() {
            for (&i, &v) in c.idx.iter().zip(&c.val) {
                out[[i, l]] += v;
            }
        }
        out
    }
}

/// Structural constants of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    /// Neurons per output class.
    pub m: usize,
    pub lambda: f64,
}

/// Trainable `W` (`d*m x d`, row block `i` holds the neurons of class `i`)
/// and `Z` (`d x d`), plus the fixed `m` and `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    w: Array2<f64>,
    z: Array2<f64>,
    m: usize,
    lambda: f64,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        validate_spec(spec)?;
        Ok(Self {
            w: Array2::zeros((spec.dim * spec.m, spec.dim).f()),
            z: Array2::zeros((spec.dim, spec.dim)),
            m: spec.m,
            lambda: spec.lambda,
        })
    }

    pub fn from_parts(w: Array2<f64>, z: Array2<f64>, m: usize, lambda: f64) -> Result<Self> {
        let dim = z.nrows();
        validate_spec(&ModelSpec { dim, m, lambda })?;
        if z.ncols() != dim {
            return Err(Error::Shape(format!(
                "Z is {}x{}, expected square",
                z.nrows(),
                z.ncols()
            )));
        }
        if w.dim() != (dim * m, dim) {
            return Err(Error::Shape(format!(
                "W is {}x{}, expected {}x{}",
                w.nrows(),
                w.ncols(),
                dim * m,
                dim
            )));
        }
        let mut wf = Array2::zeros((dim * m, dim).f());
        wf.assign(&w);
        Ok(Self {
            w: wf,
            z: z.as_standard_layout().into_owned(),
            m,
            lambda,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            dim: self.dim(),
            m: self.m,
            lambda: self.lambda,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Returns a copy with a different output scale.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        validate_spec(&ModelSpec {
            dim: self.dim(),
            m: self.m,
            lambda,
        })?;
        Ok(Self { lambda, ..self.clone() })
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn z_mut(&mut self) -> &mut Array2<f64> {
        &mut self.z
    }

    /// Mutable access to `W`. The column-major layout must be kept, so only
    /// element-wise edits are offered.
    pub fn w_mut(&mut self) -> ndarray::ArrayViewMut2<'_, f64> {
        self.w.view_mut()
    }

    /// Row index of neuron `k` of class `i`.
    pub fn neuron_row(&self, class: ClassId, k: usize) -> usize {
        class * self.m + k
    }

    pub fn neuron(&self, class: ClassId, k: usize) -> ArrayView1<'_, f64> {
        self.w.row(self.neuron_row(class, k))
    }

    /// Mean over the `m` neurons of a class of `<w_{i,k}, v>`.
    pub fn neuron_mean_dot(&self, class: ClassId, v: ArrayView1<'_, f64>) -> f64 {
        (0..self.m).map(|k| self.neuron(class, k).dot(&v)).sum::<f64>() / self.m as f64
    }

    pub(crate) fn w_col(&self, c: usize) -> &[f64] {
        self.w.column(c).to_slice().expect("W is column-major")
    }

    pub(crate) fn w_col_mut(&mut self, c: usize) -> &mut [f64] {
        self.w.column_mut(c).into_slice().expect("W is column-major")
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.z.iter()).all(|v| v.is_finite())
    }
}

fn validate_spec(spec: &ModelSpec) -> Result<()> {
    if spec.dim == 0 || spec.m == 0 {
        return Err(Error::InvalidSpec("dimension and neuron count must be positive".into()));
    }
    if !(spec.lambda > 0.0 && spec.lambda.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "lambda must be positive, got {}",
            spec.lambda
        )));
    }
    Ok(())
}

/// Draws every entry of `Z` then `W` (row-major order) i.i.d. from
/// `N(0, sigma0^2)`.
pub fn init_params(spec: &ModelSpec, sigma0: f64, seed: u64) -> Result<ModelParams> {
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::InvalidSpec(format!("sigma0 must be non-negative, got {sigma0}")));
    }
    let mut params = ModelParams::zeros(spec)?;
    if sigma0 == 0.0 {
        return Ok(params);
    }
    let normal = Normal::new(0.0, sigma0).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut rng = seed::rng(seed, Stream::Init);
    params.z.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    let (rows, cols) = params.w.dim();
    for r in 0..rows {
        for c in 0..cols {
            params.w[[r, c]] = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `softmax(X^T Z X[-1] / sqrt(d))` over all `L` positions (no position is
/// masked: with a last-token query causal masking admits everything).
pub fn attention_scores(z: &Array2<f64>, x: &Sequence) -> Vec<f64> {
    let mut alpha = raw_scores(z, x);
    softmax_in_place(&mut alpha);
    alpha
}

fn raw_scores(z: &Array2<f64>, x: &Sequence) -> Vec<f64> {
    let q = x.last();
    let scale = (x.dim() as f64).sqrt();
    x.cols()
        .iter()
        .map(|col| {
            let mut s = 0.0;
            for (&a, &va) in col.idx.iter().zip(&col.val) {
                for (&b, &vb) in q.idx.iter().zip(&q.val) {
                    s += va * z[[a, b]] * vb;
                }
            }
            s / scale
        })
        .collect()
}

/// Attended vector `X alpha + X[-1]`.
pub fn attn_output(z: &Array2<f64>, x: &Sequence) -> Vec<f64> {
    let alpha = attention_scores(z, x);
    attend(x, &alpha)
}

fn attend(x: &Sequence, alpha: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.dim()];
    attend_into(x, alpha, &mut out);
    out
}

fn attend_into(x: &Sequence, alpha: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (col, &a) in x.cols().iter().zip(alpha) {
        for (&i, &v) in col.idx.iter().zip(&col.val) {
            out[i] += a * v;
        }
    }
    let q = x.last();
    for (&i, &v) in q.idx.iter().zip(&q.val) {
        out[i] += v;
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardCache {
    pub alpha: Vec<f64>,
    pub x_a: Vec<f64>,
    /// Pre-activations `<w_{i,k}, x_a>`, indexed by neuron row `i*m + k`.
    pub activations: Vec<f64>,
    /// Scaled MLP output before the softmax.
    pub output: Vec<f64>,
    pub logits: Vec<f64>,
    /// Non-zero coordinates of `x_a`.
    pub(crate) support: Vec<usize>,
}

/// Runs the network on one input sequence.
pub fn forward(params: &ModelParams, x: &Sequence) -> ForwardCache {
    let mut cache = ForwardCache::default();
    forward_into(params, x, &mut cache);
    cache
}

/// Same as [`forward`] but reuses the buffers in `cache`.
pub fn forward_into(params: &ModelParams, x: &Sequence, cache: &mut ForwardCache) {
    assert_eq!(x.dim(), params.dim(), "input dimension does not match the model");
    assert!(!x.is_empty(), "input sequence must be non-empty");
    let d = params.dim();
    let m = params.m;

    cache.alpha = raw_scores(&params.z, x);
    softmax_in_place(&mut cache.alpha);

    cache.x_a.resize(d, 0.0);
    attend_into(x, &cache.alpha, &mut cache.x_a);
    cache.support.clear();
    cache.support.extend((0..d).filter(|&i| cache.x_a[i] != 0.0));

    let h = &mut cache.activations;
    h.clear();
    h.resize(d * m, 0.0);
    for &c in &cache.support {
        let coef = cache.x_a[c];
        for (hj, wj) in h.iter_mut().zip(params.w_col(c)) {
            *hj += coef * wj;
        }
    }

    let scale = params.lambda / m as f64;
    cache.output.clear();
    cache.output.extend(
        h.chunks_exact(m)
            .map(|block| scale * block.iter().copied().map(relu).sum::<f64>()),
    );
    cache.logits.clone_from(&cache.output);
    softmax_in_place(&mut cache.logits);
}

/// Unlike `f64::max`, keeps NaN.
fn relu(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Cross-entropy from pre-softmax outputs, `-ln softmax(output)_y`.
pub(crate) fn cross_entropy(output: &[f64], y: ClassId) -> f64 {
    let l = log_sum_exp(output) - output[y];
    // clamp rounding below zero but let NaN through
    if l < 0.0 {
        0.0
    } else {
        l
    }
}

pub fn loss_example(params: &ModelParams, x: &Sequence, y: ClassId) -> f64 {
    assert!(y < params.dim(), "label out of range");
    cross_entropy(&forward(params, x).output, y)
}

/// Label multiplicities of one distinct context.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCount {
    pub class: ClassId,
    pub count: usize,
    /// Sum of per-example gradient weights.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextGroup {
    pub context: Vec<TokenId>,
    pub seq: Sequence,
    pub labels: Vec<LabelCount>,
}

impl ContextGroup {
    pub fn count(&self) -> usize {
        self.labels.iter().map(|l| l.count).sum()
    }

    pub fn weight(&self) -> f64 {
        self.labels.iter().map(|l| l.weight).sum()
    }
}

/// A dataset with identical contexts merged. Examples sharing a context share
/// one forward pass, which is what makes full-batch training affordable.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    groups: Vec<ContextGroup>,
    n_examples: usize,
}

impl Batch {
    /// Every example gets weight 1.
    pub fn new(table: &EmbeddingTable, examples: &[Example]) -> Self {
        Self::weighted(table, examples, 1.0)
    }

    /// Rare-fact examples get gradient weight `rare_weight`, others 1.
    pub fn weighted(table: &EmbeddingTable, examples: &[Example], rare_weight: f64) -> Self {
        let mut map: BTreeMap<&[TokenId], BTreeMap<ClassId, (usize, f64)>> = BTreeMap::new();
        for e in examples {
            let w = if e.is_rare { rare_weight } else { 1.0 };
            let slot = map.entry(&e.context).or_default().entry(e.label).or_default();
            slot.0 += 1;
            slot.1 += w;
        }
        let groups = map
            .into_iter()
            .map(|(ctx, labels)| ContextGroup {
                context: ctx.to_vec(),
                seq: table.sequence(ctx),
                labels: labels
                    .into_iter()
                    .map(|(class, (count, weight))| LabelCount { class, count, weight })
                    .collect(),
            })
            .collect();
        Self {
            groups,
            n_examples: examples.len(),
        }
    }

    /// A batch of raw sequences with unit weights (no merging).
    pub fn from_sequences(items: Vec<(Sequence, ClassId)>) -> Self {
        let n_examples = items.len();
        let groups = items
            .into_iter()
            .map(|(seq, class)| ContextGroup {
                context: Vec::new(),
                seq,
                labels: vec![LabelCount {
                    class,
                    count: 1,
                    weight: 1.0,
                }],
            })
            .collect();
        Self { groups, n_examples }
    }

    pub fn groups(&self) -> &[ContextGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.n_examples
    }

    pub fn is_empty(&self) -> bool {
        self.n_examples == 0
    }
}

/// Unweighted mean cross-entropy over the examples of a batch.
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cache = ForwardCache::default();
    let mut total = 0.0;
    for g in batch.groups() {
        forward_into(params, &g.seq, &mut cache);
        for l in &g.labels {
            total += l.count as f64 * cross_entropy(&cache.output, l.class);
        }
    }
    Ok(total / batch.len() as f64)
}
