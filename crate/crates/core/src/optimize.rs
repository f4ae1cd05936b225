//! Full-batch gradient descent: staged pre-training, full fine-tuning and
//! rank-1 fine-tuning (each full-batch gradient matrix is replaced by its
//! best rank-1 approximation before the step).

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradAccumulator;
use crate::model::{Batch, ForwardCache, ModelParams};
use crate::seed::{self, Stream};

/// Three learning rates switched at iteration thresholds: `eta1` for
/// `t <= h1`, `eta2` for `h1 < t <= h2`, `eta3` afterwards (`t` counts steps
/// from 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub h1: usize,
    pub h2: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            eta1: 0.1,
            eta2: 0.05,
            eta3: 0.01,
            h1: 3,
            h2: 5003,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
    FineTune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
            Stage::FineTune => "FT",
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.h1 >= self.h2 {
            return Err(Error::InvalidSpec(format!(
                "h1 = {} must be below h2 = {}",
                self.h1, self.h2
            )));
        }
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("eta3", self.eta3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn stage(&self, t: usize) -> Stage {
        if t <= self.h1 {
            Stage::I
        } else if t <= self.h2 {
            Stage::II
        } else {
            Stage::III
        }
    }

    pub fn rate(&self, t: usize) -> f64 {
        match self.stage(t) {
            Stage::I => self.eta1,
            Stage::II => self.eta2,
            _ => self.eta3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub t_p: usize,
    pub schedule: LrSchedule,
    pub eta_f: f64,
    pub t_f: usize,
    pub lowrank: bool,
    pub reweight_rare: bool,
    pub sigma0: f64,
    pub seed: u64,
    /// Checkpoint interval in iterations; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_p: 10003,
            schedule: LrSchedule::default(),
            eta_f: fine_tune_rate(100, 6, 200.0),
            t_f: 2000,
            lowrank: false,
            reweight_rare: true,
            sigma0: 1e-3,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.eta_f >= 0.0 && self.eta_f.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "eta_f must be non-negative, got {}",
                self.eta_f
            )));
        }
        if !(self.sigma0 >= 0.0 && self.sigma0.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "sigma0 must be non-negative, got {}",
                self.sigma0
            )));
        }
        Ok(())
    }

    fn is_checkpoint(&self, iteration: usize, last: usize) -> bool {
        iteration == last || (self.checkpoint_every > 0 && iteration.is_multiple_of(self.checkpoint_every))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Number of steps taken when `loss` was measured.
    pub iteration: usize,
    pub stage: Stage,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    /// Iterations at which the hook was told to checkpoint.
    pub checkpoints: Vec<usize>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.loss).reduce(f64::min)
    }

    /// `iter,stage,loss` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,stage,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.iteration, r.stage.as_str(), r.loss));
        }
        out
    }
}

/// What the training loop reports to its hook after each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEvent {
    pub iteration: usize,
    pub checkpoint: bool,
}

/// Called with the parameters after 0, 1, ..., T steps.
pub type Hook<'a> = dyn FnMut(StepEvent, &ModelParams) -> Result<()> + 'a;

fn noop(_: StepEvent, _: &ModelParams) -> Result<()> {
    Ok(())
}

#[derive(Clone, Copy)]
enum Update {
    Full,
    Rank1 { seed: u64 },
}

struct Loop<'a> {
    config: &'a TrainConfig,
    steps: usize,
    rate: &'a dyn Fn(usize) -> f64,
    stage: &'a dyn Fn(usize) -> Stage,
    update: Update,
}

fn run_loop(
    params: &ModelParams,
    batch: &Batch,
    spec: Loop<'_>,
    hook: &mut Hook<'_>,
) -> Result<(ModelParams, TrainTrace)> {
    let mut params = params.clone();
    let mut trace = TrainTrace::default();
    if spec.steps == 0 {
        if !batch.is_empty() {
            let loss = crate::model::batch_loss(&params, batch)?;
            trace.records.push(TraceRecord {
                iteration: 0,
                stage: (spec.stage)(0),
                loss,
            });
        }
        trace.checkpoints.push(0);
        hook(
            StepEvent {
                iteration: 0,
                checkpoint: true,
            },
            &params,
        )?;
        return Ok((params, trace));
    }
    let mut acc = GradAccumulator::new(&params.spec());
    let mut cache = ForwardCache::default();
    for t in 0..=spec.steps {
        let checkpoint = spec.config.is_checkpoint(t, spec.steps);
        if checkpoint {
            trace.checkpoints.push(t);
        }
        hook(
            StepEvent {
                iteration: t,
                checkpoint,
            },
            &params,
        )?;

        let loss = if t < spec.steps {
            acc.batch(&params, batch, &mut cache)?
        } else {
            crate::model::batch_loss(&params, batch)?
        };
        trace.records.push(TraceRecord {
            iteration: t,
            stage: (spec.stage)(t),
            loss,
        });
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                trace: Box::new(trace),
            });
        }
        if t == spec.steps {
            break;
        }
        let eta = (spec.rate)(t);
        match spec.update {
            Update::Full => apply_full(&mut params, &acc, eta),
            Update::Rank1 { seed } => apply_rank1(&mut params, &acc, eta, seed),
        }
    }
    Ok((params, trace))
}

fn apply_full(params: &mut ModelParams, acc: &GradAccumulator, eta: f64) {
    if eta == 0.0 {
        return;
    }
    for &c in acc.touched_columns() {
        let g = acc.grad.dw.column(c);
        let g = g.to_slice().expect("dW is column-major");
        for (w, gv) in params.w_col_mut(c).iter_mut().zip(g) {
            *w -= eta * gv;
        }
    }
    params.z_mut().scaled_add(-eta, &acc.grad.dz);
}

fn apply_rank1(params: &mut ModelParams, acc: &GradAccumulator, eta: f64, seed: u64) {
    if eta == 0.0 {
        return;
    }
    let rw = rank1_factors_on(&acc.grad.dw, acc.touched_columns(), seed);
    for (c, &vc) in rw.v.iter().enumerate() {
        if vc == 0.0 {
            continue;
        }
        let s = eta * rw.sigma * vc;
        for (w, u) in params.w_col_mut(c).iter_mut().zip(&rw.u) {
            *w -= s * u;
        }
    }
    let rz = rank1_factors(&acc.grad.dz, seed);
    let z = params.z_mut();
    for (r, &ur) in rz.u.iter().enumerate() {
        if ur == 0.0 {
            continue;
        }
        for (c, &vc) in rz.v.iter().enumerate() {
            z[[r, c]] -= eta * rz.sigma * ur * vc;
        }
    }
}

/// Staged full-batch gradient descent. The batch carries the per-example
/// weights (see [`pretrain_batch`]).
pub fn pretrain(params: &ModelParams, batch: &Batch, config: &TrainConfig) -> Result<(ModelParams, TrainTrace)> {
    pretrain_with(params, batch, config, &mut noop)
}

pub fn pretrain_with(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
    hook: &mut Hook<'_>,
) -> Result<(ModelParams, TrainTrace)> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sched = config.schedule;
    run_loop(
        params,
        batch,
        Loop {
            config,
            steps: config.t_p,
            rate: &|t| sched.rate(t),
            stage: &|t| sched.stage(t),
            update: Update::Full,
        },
        hook,
    )
}

/// The next-token batch used for pre-training: with `reweight_rare`, each
/// rare-fact example's gradient counts `k` times.
pub fn pretrain_batch(corpus: &crate::corpus::Corpus, config: &TrainConfig) -> Batch {
    let w = if config.reweight_rare {
        corpus.spec.k as f64
    } else {
        1.0
    };
    Batch::weighted(&corpus.table, &corpus.ntp, w)
}

fn finetune(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
    update: Update,
    hook: &mut Hook<'_>,
) -> Result<(ModelParams, TrainTrace)> {
    config.validate()?;
    if batch.is_empty() && config.t_f > 0 {
        return Err(Error::EmptyDataset);
    }
    let eta = config.eta_f;
    run_loop(
        params,
        batch,
        Loop {
            config,
            steps: config.t_f,
            rate: &|_| eta,
            stage: &|_| Stage::FineTune,
            update,
        },
        hook,
    )
}

/// `t_f` full-batch steps at the fixed rate `eta_f`, updating `W` and `Z`.
pub fn finetune_full(params: &ModelParams, batch: &Batch, config: &TrainConfig) -> Result<(ModelParams, TrainTrace)> {
    finetune_full_with(params, batch, config, &mut noop)
}

pub fn finetune_full_with(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
    hook: &mut Hook<'_>,
) -> Result<(ModelParams, TrainTrace)> {
    finetune(params, batch, config, Update::Full, hook)
}

/// Like [`finetune_full`], but each step uses the best rank-1 approximation
/// of the stacked `W` gradient (`d*m x d`) and of the `Z` gradient.
pub fn finetune_lowrank(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    finetune_lowrank_with(params, batch, config, &mut noop)
}

pub fn finetune_lowrank_with(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
    hook: &mut Hook<'_>,
) -> Result<(ModelParams, TrainTrace)> {
    let seed = seed::derive(config.seed, Stream::PowerIteration);
    finetune(params, batch, config, Update::Rank1 { seed }, hook)
}

/// Dispatches on `config.lowrank`.
pub fn finetune_with(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
    hook: &mut Hook<'_>,
) -> Result<(ModelParams, TrainTrace)> {
    if config.lowrank {
        finetune_lowrank_with(params, batch, config, hook)
    } else {
        finetune_full_with(params, batch, config, hook)
    }
}

/// `m |R| / lambda^2`, the fine-tuning rate scale with its constant set to 1.
pub fn fine_tune_rate(m: usize, r_size: usize, lambda: f64) -> f64 {
    (m * r_size) as f64 / (lambda * lambda)
}

/// Outcome of a fine-tuning run with per-iteration model selection.
#[derive(Debug, Clone)]
pub struct FineTuneResult {
    pub last: ModelParams,
    pub best: ModelParams,
    /// First iteration attaining the best score. Iteration 0 is the
    /// unmodified model and is a candidate only when `t_f == 0`.
    pub best_iteration: usize,
    pub best_score: f64,
    /// Score after each of `0..=t_f` steps.
    pub scores: Vec<f64>,
    pub trace: TrainTrace,
}

/// Fine-tunes (full or rank-1 per `config.lowrank`), scoring the model after
/// every step and keeping the first argmax.
pub fn finetune_select(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
    score: &mut dyn FnMut(&ModelParams) -> Result<f64>,
    hook: &mut Hook<'_>,
) -> Result<FineTuneResult> {
    let mut scores = Vec::with_capacity(config.t_f + 1);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let t_f = config.t_f;
    let mut inner = |ev: StepEvent, p: &ModelParams| -> Result<()> {
        let s = score(p)?;
        scores.push(s);
        let eligible = ev.iteration > 0 || t_f == 0;
        if eligible && best.as_ref().is_none_or(|(_, b, _)| s > *b) {
            best = Some((ev.iteration, s, p.clone()));
        }
        hook(ev, p)
    };
    let (last, trace) = finetune_with(params, batch, config, &mut inner)?;
    let (best_iteration, best_score, best) = best.expect("at least one eligible iteration");
    Ok(FineTuneResult {
        last,
        best,
        best_iteration,
        best_score,
        scores,
        trace,
    })
}

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 1000;

/// `sigma * u v^T` with unit `u`, `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1 {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Rank1 {
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.u.len(), self.v.len()), |(i, j)| {
            self.sigma * self.u[i] * self.v[j]
        })
    }
}

/// Best rank-1 approximation (Frobenius norm) of `b`.
pub fn rank1_approx(b: &Array2<f64>) -> Array2<f64> {
    rank1_factors(b, 0).to_matrix()
}

/// Leading singular triplet by power iteration on `B^T B`. The start vector
/// is drawn from `seed`; the sign is fixed so the first non-zero entry of
/// `u` is positive.
pub fn rank1_factors(b: &Array2<f64>, seed: u64) -> Rank1 {
    let nonzero: Vec<usize> = (0..b.ncols())
        .filter(|&c| b.column(c).iter().any(|&v| v != 0.0))
        .collect();
    rank1_factors_on(b, &nonzero, seed)
}

/// Same as [`rank1_factors`] when every column outside `cols` is zero.
fn rank1_factors_on(b: &Array2<f64>, cols: &[usize], seed: u64) -> Rank1 {
    let (rows, ncols) = b.dim();
    let mut cols = cols.to_vec();
    cols.sort_unstable();
    let zero = Rank1 {
        sigma: 0.0,
        u: vec![0.0; rows],
        v: vec![0.0; ncols],
    };
    let k = cols.len();
    if k == 0 {
        return zero;
    }

    let mut gram = Array2::<f64>::zeros((k, k));
    for a in 0..k {
        let ca = b.column(cols[a]);
        for c in a..k {
            let v = ca.dot(&b.column(cols[c]));
            gram[[a, c]] = v;
            gram[[c, a]] = v;
        }
    }
    if gram.diag().iter().all(|&v| v == 0.0) {
        return zero;
    }

    let mut rng = seed::rng(seed, Stream::PowerIteration);
    let mut v: ndarray::Array1<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    for _ in 0..POWER_MAX_ITERS {
        let mut next = gram.dot(&v);
        if normalize(&mut next) == 0.0 {
            // start vector orthogonal to the range; restart from the largest column
            let j = (0..k)
                .max_by(|&x, &y| gram[[x, x]].total_cmp(&gram[[y, y]]))
                .unwrap_or(0);
            next = gram.column(j).to_owned();
            normalize(&mut next);
        }
        let delta = (&next - &v).iter().map(|d| d * d).sum::<f64>().sqrt();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    // Rayleigh refinement: one exact step, then u = B v / |B v|.
    let mut refined = gram.dot(&v);
    if normalize(&mut refined) > 0.0 {
        v = refined;
    }

    let mut u = vec![0.0; rows];
    for (a, &c) in cols.iter().enumerate() {
        let va = v[a];
        for (ui, bv) in u.iter_mut().zip(b.column(c)) {
            *ui += va * bv;
        }
    }
    let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sigma == 0.0 {
        return zero;
    }
    u.iter_mut().for_each(|x| *x /= sigma);

    let mut full_v = vec![0.0; ncols];
    for (a, &c) in cols.iter().enumerate() {
        full_v[c] = v[a];
    }
    let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = u.iter().find(|x| x.abs() > 1e-12 * umax) {
        if *first < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            full_v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Rank1 { sigma, u, v: full_v }
}

fn normalize(v: &mut ndarray::Array1<f64>) -> f64 {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v.mapv_inplace(|x| x / n);
    }
    n
}
