//! Closed-form gradients of the cross-entropy loss with respect to `W` and
//! `Z`, and a central-difference checker.
//!
//! With `g = softmax(output) - e_y` (the true gradient direction, so that
//! `param - eta * grad` descends):
//!
//! * `dL/dw_{i,k} = (lambda/m) g_i relu'(<w_{i,k}, x_a>) x_a`
//! * with `v = sum_{i,k} (lambda/m) g_i relu'(.) w_{i,k}` (the gradient at
//!   `x_a`), `dL/dZ = (1/sqrt(d)) X (diag(alpha) - alpha alpha^T) X^T v X[-1]^T`.
//!
//! `relu'(0)` is taken to be 0.

use ndarray::{Array2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;
use crate::error::{Error, Result};
use crate::model::{cross_entropy, forward, forward_into, Batch, ForwardCache, ModelParams, ModelSpec, Sequence};

/// Gradients shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    /// `d*m x d`, stored column-major like `W`.
    pub dw: Array2<f64>,
    pub dz: Array2<f64>,
}

impl GradPair {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            dw: Array2::zeros((spec.dim * spec.m, spec.dim).f()),
            dz: Array2::zeros((spec.dim, spec.dim)),
        }
    }

    pub fn norm(&self) -> f64 {
        self.dw.iter().chain(self.dz.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.dw.iter().chain(self.dz.iter()).all(|v| v.is_finite())
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.dw.mapv_inplace(|v| v * s);
        self.dz.mapv_inplace(|v| v * s);
        self
    }

    pub fn add_scaled(&mut self, other: &GradPair, s: f64) {
        self.dw.scaled_add(s, &other.dw);
        self.dz.scaled_add(s, &other.dz);
    }
}

/// Reusable gradient buffer that remembers which columns of `dW` were
/// written, so resets and updates only touch those.
#[derive(Debug, Clone)]
pub(crate) struct GradAccumulator {
    pub grad: GradPair,
    touched: Vec<bool>,
    touched_list: Vec<usize>,
    coef: Vec<f64>,
    col_dots: Vec<f64>,
    cols: Vec<usize>,
}

impl GradAccumulator {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            grad: GradPair::zeros(spec),
            touched: vec![false; spec.dim],
            touched_list: Vec::new(),
            coef: Vec::new(),
            col_dots: vec![0.0; spec.dim],
            cols: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        for &c in &self.touched_list {
            self.grad.dw.column_mut(c).fill(0.0);
            self.touched[c] = false;
        }
        self.touched_list.clear();
        self.grad.dz.fill(0.0);
    }

    /// Columns of `dW` that may be non-zero, in first-touch order.
    pub fn touched_columns(&self) -> &[usize] {
        &self.touched_list
    }

    fn touch(&mut self, c: usize) {
        if !self.touched[c] {
            self.touched[c] = true;
            self.touched_list.push(c);
        }
    }

    /// Adds the gradient of `sum_i residual_i * output_i` (backpropagated
    /// through the cached forward pass) to the buffer.
    pub fn accumulate(&mut self, params: &ModelParams, x: &Sequence, cache: &ForwardCache, residual: &[f64]) {
        let d = params.dim();
        let m = params.m();
        let scale = params.lambda() / m as f64;

        self.coef.resize(d * m, 0.0);
        for (i, (coef, h)) in self
            .coef
            .chunks_exact_mut(m)
            .zip(cache.activations.chunks_exact(m))
            .enumerate()
        {
            let ri = scale * residual[i];
            for (c, &hv) in coef.iter_mut().zip(h) {
                *c = if hv > 0.0 { ri } else { 0.0 };
            }
        }

        // Columns of W that meet the input: the union of the token supports.
        self.cols.clear();
        for col in x.cols() {
            self.cols.extend_from_slice(&col.idx);
        }
        self.cols.sort_unstable();
        self.cols.dedup();

        let need_dots = x.len() > 1;
        let cols = std::mem::take(&mut self.cols);
        for &c in &cols {
            let xa = cache.x_a[c];
            let wc = params.w_col(c);
            if xa != 0.0 {
                self.touch(c);
                let mut dwc = self.grad.dw.column_mut(c);
                let dwc = dwc.as_slice_mut().expect("dW is column-major");
                let mut dot = 0.0;
                for ((g, &w), &k) in dwc.iter_mut().zip(wc).zip(&self.coef) {
                    dot += w * k;
                    *g += xa * k;
                }
                self.col_dots[c] = dot;
            } else if need_dots {
                self.col_dots[c] = wc.iter().zip(&self.coef).map(|(w, k)| w * k).sum();
            }
        }
        self.cols = cols;

        if !need_dots {
            return;
        }
        // d(loss)/d(alpha_l) = <x_l, v>, then through the softmax Jacobian.
        let dalpha: Vec<f64> = x.cols().iter().map(|col| col.dot_dense(&self.col_dots)).collect();
        let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let q = x.last();
        for ((col, &a), &g) in x.cols().iter().zip(&cache.alpha).zip(&dalpha) {
            let ds = a * (g - mean) * inv_sqrt_d;
            if ds == 0.0 {
                continue;
            }
            for (&r, &vr) in col.idx.iter().zip(&col.val) {
                for (&s, &vs) in q.idx.iter().zip(&q.val) {
                    self.grad.dz[[r, s]] += ds * vr * vs;
                }
            }
        }
    }

    /// Fills the buffer with the weighted mean gradient of `batch` (weights
    /// divided by the example count) and returns the unweighted mean loss.
    pub fn batch(&mut self, params: &ModelParams, batch: &Batch, cache: &mut ForwardCache) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.reset();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut residual = vec![0.0; params.dim()];
        for g in batch.groups() {
            forward_into(params, &g.seq, cache);
            let w = g.weight();
            for (r, &p) in residual.iter_mut().zip(&cache.logits) {
                *r = w * p / n;
            }
            for l in &g.labels {
                residual[l.class] -= l.weight / n;
                loss += l.count as f64 * cross_entropy(&cache.output, l.class);
            }
            self.accumulate(params, &g.seq, cache, &residual);
        }
        Ok(loss / n)
    }
}

/// Gradient of the loss on one example.
pub fn grad_example(params: &ModelParams, x: &Sequence, y: ClassId) -> GradPair {
    assert!(y < params.dim(), "label out of range");
    let cache = forward(params, x);
    let mut residual = cache.logits.clone();
    residual[y] -= 1.0;
    let mut acc = GradAccumulator::new(&params.spec());
    acc.accumulate(params, x, &cache, &residual);
    acc.grad
}

/// Mean gradient over a batch, honouring per-example weights.
pub fn batch_grads(params: &ModelParams, batch: &Batch) -> Result<GradPair> {
    let mut acc = GradAccumulator::new(&params.spec());
    acc.batch(params, batch, &mut ForwardCache::default())?;
    Ok(acc.grad)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub filtered_max_rel_err: f64,
    /// Coordinates excluded because a ReLU kink lies within the step.
    pub n_kinks: usize,
    pub n_coords: usize,
    pub step: f64,
    /// Set when the kink-filtered error exceeds [`FD_TOLERANCE`].
    pub flagged: bool,
}

pub const FD_TOLERANCE: f64 = 1e-6;

/// Denominator floor for relative errors; below it the comparison is
/// effectively absolute (central differences carry ~1e-10 round-off).
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Pre-activations within this fraction of `|x_a|` count as kinks.
pub const KINK_THRESHOLD: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn activation_pattern(params: &ModelParams, x: &Sequence) -> Vec<bool> {
    forward(params, x).activations.iter().map(|&h| h > 0.0).collect()
}

/// Compares [`grad_example`] against central differences of the loss over
/// every coordinate of `W` and `Z`.
///
/// A `W` coordinate is filtered when its neuron's pre-activation is within
/// `KINK_THRESHOLD * |x_a|` of zero; a `Z` coordinate when the perturbation
/// changes any neuron's activation state.
pub fn fd_check(params: &ModelParams, x: &Sequence, y: ClassId, step: f64) -> FdReport {
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = grad_example(params, x, y);
    let base = forward(params, x);
    let xa_norm = base.x_a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let base_pattern: Vec<bool> = base.activations.iter().map(|&h| h > 0.0).collect();

    let mut probe = params.clone();
    let mut max_all = 0.0f64;
    let mut max_filtered = 0.0f64;
    let mut n_kinks = 0;
    let mut n_coords = 0;

    let (rows, cols) = params.w().dim();
    for r in 0..rows {
        let kink = base.activations[r].abs() < KINK_THRESHOLD * xa_norm;
        for c in 0..cols {
            let orig = params.w()[[r, c]];
            probe.w_mut()[[r, c]] = orig + step;
            let up = crate::model::loss_example(&probe, x, y);
            probe.w_mut()[[r, c]] = orig - step;
            let down = crate::model::loss_example(&probe, x, y);
            probe.w_mut()[[r, c]] = orig;
            let err = rel_err(analytic.dw[[r, c]], (up - down) / (2.0 * step));
            n_coords += 1;
            max_all = max_all.max(err);
            if kink {
                n_kinks += 1;
            } else {
                max_filtered = max_filtered.max(err);
            }
        }
    }

    let d = params.dim();
    for r in 0..d {
        for c in 0..d {
            let orig = params.z()[[r, c]];
            probe.z_mut()[[r, c]] = orig + step;
            let up = crate::model::loss_example(&probe, x, y);
            let kink_up = activation_pattern(&probe, x) != base_pattern;
            probe.z_mut()[[r, c]] = orig - step;
            let down = crate::model::loss_example(&probe, x, y);
            let kink_down = activation_pattern(&probe, x) != base_pattern;
            probe.z_mut()[[r, c]] = orig;
            let err = rel_err(analytic.dz[[r, c]], (up - down) / (2.0 * step));
            n_coords += 1;
            max_all = max_all.max(err);
            if kink_up || kink_down {
                n_kinks += 1;
            } else {
                max_filtered = max_filtered.max(err);
            }
        }
    }

    FdReport {
        max_rel_err: max_all,
        filtered_max_rel_err: max_filtered,
        n_kinks,
        n_coords,
        step,
        flagged: max_filtered > FD_TOLERANCE,
    }
}
