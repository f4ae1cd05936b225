//! Runs: data generation, pre-training, fine-tuning with best-iteration
//! selection, evaluation, and the files written for each seed.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use factlab::corpus::{Corpus, EmbeddingTable, TokenId, TokenRole};
use factlab::io::{save_checkpoint, write_atomic, Checkpoint, DatasetRecord, ExampleKind, VocabManifest};
use factlab::metrics::{accuracy, attention_heatmap, evaluate, EvalBundle, MetricsRecord};
use factlab::model::{init_params, Batch, ModelParams};
use factlab::optimize::{
    finetune_select, pretrain_batch, pretrain_with, FineTuneResult, Stage, StepEvent, TraceRecord, TrainTrace,
};
use factlab::seed::{self, Stream};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    Best,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Best => "best",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub phase: Phase,
    pub iteration: usize,
    pub record: MetricsRecord,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("phase,iteration,{}\n", MetricsRecord::CSV_HEADER);
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.phase.as_str(),
            r.iteration,
            r.record.to_csv_row()
        ));
    }
    out
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: Option<PathBuf>,
    pub entropy: f64,
    pub pretrain_trace: TrainTrace,
    pub finetune_trace: TrainTrace,
    /// Held-out accuracy after each fine-tuning step `0..=t_f`.
    pub ood_scores: Vec<f64>,
    pub best_iteration: usize,
    pub best: MetricsRecord,
    /// Metrics of the final pre-trained model.
    pub pretrained: MetricsRecord,
    /// Populated only for runs that write files.
    pub rows: Vec<MetricsRow>,
}

impl SeedRun {
    pub fn ood_accuracy(&self) -> f64 {
        self.best.ood_accuracy
    }

    pub fn final_pretrain_loss(&self) -> f64 {
        self.pretrain_trace.final_loss().unwrap_or(f64::NAN)
    }
}

/// Pre-trained parameters keyed by everything that influences them, so runs
/// differing only in fine-tuning settings share one pre-training.
#[derive(Default)]
pub struct PretrainCache {
    entries: HashMap<String, (ModelParams, TrainTrace)>,
}

impl PretrainCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn pretrain_key(cfg: &ExperimentConfig, seed: u64) -> String {
    json!({
        "vocab": cfg.vocab_spec(),
        "model": [cfg.d, cfg.m, cfg.lambda],
        "sigma0": cfg.sigma0,
        "schedule": [cfg.eta1, cfg.eta2, cfg.eta3],
        "h": [cfg.h1, cfg.h2],
        "t_p": cfg.t_p,
        "reweight_rare": cfg.reweight_rare,
        "seed": seed,
    })
    .to_string()
}

pub fn token_name(role: TokenRole) -> String {
    match role {
        TokenRole::Context => "o".into(),
        TokenRole::End => "END".into(),
        TokenRole::Format => "p".into(),
        TokenRole::Subject(j) => format!("s{j}"),
        TokenRole::Answer(j) => format!("a{j}"),
        TokenRole::Relation(i) => format!("r{i}"),
    }
}

fn context_name(table: &EmbeddingTable, ctx: &[TokenId]) -> String {
    ctx.iter()
        .map(|&t| token_name(table.role(t)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn heatmap_contexts(corpus: &Corpus) -> Vec<Vec<TokenId>> {
    let mut out: Vec<Vec<TokenId>> = Vec::new();
    for e in corpus.ntp.iter().chain(&corpus.qa) {
        if !out.contains(&e.context) {
            out.push(e.context.clone());
        }
    }
    out
}

fn heatmap_csv(corpus: &Corpus, snapshots: &[(&str, &ModelParams)]) -> String {
    let contexts = heatmap_contexts(corpus);
    let width = contexts.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = String::from("phase,context_id,tokens");
    for l in 1..=width {
        out.push_str(&format!(",alpha_{l}"));
    }
    out.push('\n');
    for (phase, params) in snapshots {
        for (id, (ctx, alpha)) in contexts
            .iter()
            .zip(attention_heatmap(params, &corpus.table, &contexts))
            .enumerate()
        {
            out.push_str(&format!("{phase},{id},{}", context_name(&corpus.table, ctx)));
            for l in 0..width {
                out.push(',');
                if let Some(a) = alpha.get(l) {
                    out.push_str(&a.to_string());
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed_{seed}"))
}

pub fn manifest(cfg: &ExperimentConfig, seed: u64) -> serde_json::Value {
    json!({
        "config": cfg,
        "seed": seed,
        "effective": {
            "eta_f": cfg.effective_eta_f(),
            "train": cfg.train_config(seed),
            "vocab": cfg.vocab_spec(),
            "model": cfg.model_spec(),
        },
        "stream_seeds": {
            "vocab": seed::derive(seed, Stream::Vocab),
            "sentences": seed::derive(seed, Stream::Sentences),
            "split": seed::derive(seed, Stream::Split),
            "init": seed::derive(seed, Stream::Init),
            "power_iteration": seed::derive(seed, Stream::PowerIteration),
        },
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn write(path: &Path, bytes: &[u8]) -> LabResult<()> {
    write_atomic(path, bytes).map_err(|e| match e {
        factlab::Error::Io(source) => LabError::Io {
            path: path.to_owned(),
            source,
        },
        other => other.into(),
    })
}

fn create_dir(path: &Path) -> LabResult<()> {
    fs::create_dir_all(path).map_err(LabError::io(path))
}

/// Writes `vocab.json` and the JSONL datasets into `dir`.
pub fn write_data(corpus: &Corpus, dir: &Path) -> LabResult<()> {
    create_dir(dir)?;
    let vocab = serde_json::to_vec_pretty(&VocabManifest::from_table(&corpus.table))?;
    write(&dir.join("vocab.json"), &vocab)?;
    let sets = [
        ("ntp.jsonl", &corpus.ntp, ExampleKind::Ntp),
        ("qa_ft.jsonl", &corpus.ft, ExampleKind::Qa),
        ("qa_heldout.jsonl", &corpus.heldout, ExampleKind::Qa),
    ];
    for (name, examples, kind) in sets {
        let recs: Vec<DatasetRecord> = examples.iter().map(|e| DatasetRecord::new(e, kind)).collect();
        let mut buf = Vec::new();
        factlab::io::export_dataset(&mut buf, &recs)?;
        write(&dir.join(name), &buf)?;
    }
    Ok(())
}

fn ckpt_manifest(cfg: &ExperimentConfig, seed: u64, phase: Phase, iteration: usize) -> serde_json::Value {
    json!({ "phase": phase.as_str(), "iteration": iteration, "seed": seed, "config": cfg })
}

fn save_ckpt(dir: &Path, cfg: &ExperimentConfig, seed: u64, phase: Phase, t: usize, p: &ModelParams) -> LabResult<()> {
    let ckpt = Checkpoint {
        params: p.clone(),
        manifest: ckpt_manifest(cfg, seed, phase, t),
    };
    let path = dir.join(format!("ckpt_{t}"));
    save_checkpoint(&path, &ckpt).map_err(|e| match e {
        factlab::Error::Io(source) => LabError::Io { path, source },
        other => other.into(),
    })
}

/// Pre-trains from the seeded initialization, reusing `cache` when given.
/// When `dir` is set, evaluation rows and checkpoints are produced.
pub fn pretrain_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    corpus: &Corpus,
    dir: Option<&Path>,
    rows: &mut Vec<MetricsRow>,
    cache: Option<&mut PretrainCache>,
) -> LabResult<(ModelParams, TrainTrace)> {
    let key = pretrain_key(cfg, seed);
    if dir.is_none() {
        if let Some(hit) = cache.as_ref().and_then(|c| c.entries.get(&key)) {
            return Ok(hit.clone());
        }
    }
    let tc = cfg.train_config(seed);
    let init = init_params(&cfg.model_spec(), cfg.sigma0, seed)?;
    let batch = pretrain_batch(corpus, &tc);
    let bundle = EvalBundle::new(corpus)?;
    let ckpt_dir = dir.map(|d| d.join("pretrain"));
    if let Some(d) = &ckpt_dir {
        create_dir(d)?;
    }
    let marks = [cfg.h1 + 1, cfg.h2 + 1];
    let mut side: LabResult<()> = Ok(());
    let mut hook = |ev: StepEvent, p: &ModelParams| -> factlab::Result<()> {
        let Some(d) = &ckpt_dir else {
            return Ok(());
        };
        let t = ev.iteration;
        if t.is_multiple_of(cfg.eval_every) || t == cfg.t_p || marks.contains(&t) {
            rows.push(MetricsRow {
                phase: Phase::Pretrain,
                iteration: t,
                record: evaluate(p, &bundle)?,
            });
        }
        let periodic = cfg.pretrain_ckpt_every > 0 && t.is_multiple_of(cfg.pretrain_ckpt_every);
        if side.is_ok() && (t == cfg.t_p || periodic) {
            side = save_ckpt(d, cfg, seed, Phase::Pretrain, t, p);
        }
        Ok(())
    };
    let out = pretrain_with(&init, &batch, &tc, &mut hook)?;
    side?;
    if let Some(c) = cache {
        c.entries.insert(key, out.clone());
    }
    Ok(out)
}

/// Fine-tunes `pre`, scoring held-out accuracy after every step. When `dir`
/// is set, evaluation rows and checkpoints go to `dir`.
pub fn finetune_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    corpus: &Corpus,
    pre: &ModelParams,
    dir: Option<&Path>,
    rows: &mut Vec<MetricsRow>,
) -> LabResult<FineTuneResult> {
    let bundle = EvalBundle::new(corpus)?;
    let tc = cfg.train_config(seed);
    let ft_batch = Batch::new(&corpus.table, &corpus.ft);
    if let Some(d) = dir {
        create_dir(d)?;
    }
    let mut side: LabResult<()> = Ok(());
    let mut score = |p: &ModelParams| accuracy(p, &corpus.table, &corpus.heldout);
    let mut hook = |ev: StepEvent, p: &ModelParams| -> factlab::Result<()> {
        let Some(d) = dir else {
            return Ok(());
        };
        let t = ev.iteration;
        if t.is_multiple_of(cfg.eval_every) || t == cfg.t_f {
            rows.push(MetricsRow {
                phase: Phase::Finetune,
                iteration: t,
                record: evaluate(p, &bundle)?,
            });
        }
        if side.is_ok() && ev.checkpoint {
            side = save_ckpt(d, cfg, seed, Phase::Finetune, t, p);
        }
        Ok(())
    };
    let ft = finetune_select(pre, &ft_batch, &tc, &mut score, &mut hook)?;
    side?;
    Ok(ft)
}

/// One seed end to end. Files are written only when `dir` is set.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: Option<&Path>,
    cache: Option<&mut PretrainCache>,
) -> LabResult<SeedRun> {
    cfg.validate()?;
    let corpus = Corpus::generate(&cfg.vocab_spec(), cfg.beta, seed)?;
    if let Some(d) = dir {
        create_dir(d)?;
        write(
            &d.join("manifest.json"),
            &serde_json::to_vec_pretty(&manifest(cfg, seed))?,
        )?;
        write_data(&corpus, &d.join("data"))?;
    }
    let mut rows = Vec::new();
    let (pre, pre_trace) = pretrain_seed(cfg, seed, &corpus, dir, &mut rows, cache)?;
    let ft_dir = dir.map(|d| d.join("finetune"));
    let ft = finetune_seed(cfg, seed, &corpus, &pre, ft_dir.as_deref(), &mut rows)?;

    let bundle = EvalBundle::new(&corpus)?;
    let best = evaluate(&ft.best, &bundle)?;
    let pretrained = evaluate(&pre, &bundle)?;
    rows.push(MetricsRow {
        phase: Phase::Best,
        iteration: ft.best_iteration,
        record: best,
    });

    if let Some(d) = dir {
        let mut trace = pre_trace.clone();
        trace.records.extend(
            ft.trace
                .records
                .iter()
                .filter(|r| r.iteration > 0)
                .map(|r| TraceRecord {
                    iteration: cfg.t_p + r.iteration,
                    stage: Stage::FineTune,
                    loss: r.loss,
                }),
        );
        write(&d.join("trace.csv"), trace.to_csv().as_bytes())?;
        write(&d.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
        let heat = heatmap_csv(&corpus, &[("pretrain", &pre), ("finetune", &ft.best)]);
        write(&d.join("heatmap.csv"), heat.as_bytes())?;
    }

    Ok(SeedRun {
        seed,
        dir: dir.map(Path::to_owned),
        entropy: bundle.entropy,
        pretrain_trace: pre_trace,
        finetune_trace: ft.trace,
        ood_scores: ft.scores,
        best_iteration: ft.best_iteration,
        best,
        pretrained,
        rows: if dir.is_some() { rows } else { Vec::new() },
    })
}

/// Pre-training alone: `seed_<s>/pretrain/` receives checkpoints,
/// `trace.csv` and `metrics.csv`.
pub fn pretrain_only(cfg: &ExperimentConfig, seed: u64) -> LabResult<PathBuf> {
    cfg.validate()?;
    let dir = seed_dir(cfg, seed);
    let corpus = Corpus::generate(&cfg.vocab_spec(), cfg.beta, seed)?;
    create_dir(&dir)?;
    write(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest(cfg, seed))?,
    )?;
    write_data(&corpus, &dir.join("data"))?;
    let mut rows = Vec::new();
    let (_, trace) = pretrain_seed(cfg, seed, &corpus, Some(&dir), &mut rows, None)?;
    let out = dir.join("pretrain");
    write(&out.join("trace.csv"), trace.to_csv().as_bytes())?;
    write(&out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    Ok(out.join(format!("ckpt_{}", cfg.t_p)))
}

/// Fine-tuning alone, starting from the checkpoint at `from`. Results go to
/// `seed_<s>/finetune/`.
pub fn finetune_only(cfg: &ExperimentConfig, seed: u64, from: &Path) -> LabResult<FineTuneResult> {
    cfg.validate()?;
    let corpus = Corpus::generate(&cfg.vocab_spec(), cfg.beta, seed)?;
    let pre = factlab::io::load_checkpoint(from)?.params;
    let dir = seed_dir(cfg, seed).join("finetune");
    let mut rows = Vec::new();
    let ft = finetune_seed(cfg, seed, &corpus, &pre, Some(&dir), &mut rows)?;
    rows.push(MetricsRow {
        phase: Phase::Best,
        iteration: ft.best_iteration,
        record: evaluate(&ft.best, &EvalBundle::new(&corpus)?)?,
    });
    write(&dir.join("trace.csv"), ft.trace.to_csv().as_bytes())?;
    write(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    Ok(ft)
}

/// Metrics of a checkpoint against the corpus the config and seed describe.
pub fn eval_checkpoint(cfg: &ExperimentConfig, seed: u64, path: &Path) -> LabResult<MetricsRecord> {
    cfg.validate()?;
    let corpus = Corpus::generate(&cfg.vocab_spec(), cfg.beta, seed)?;
    let params = factlab::io::load_checkpoint(path)?.params;
    Ok(evaluate(&params, &EvalBundle::new(&corpus)?)?)
}

/// Runs every configured seed into `out_dir/seed_<s>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> LabResult<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&s| run_seed(cfg, s, Some(&seed_dir(cfg, s)), None))
        .collect()
}

/// Reads a run directory's manifest back into its config and seed.
pub fn load_manifest(run_dir: &Path) -> LabResult<(ExperimentConfig, u64)> {
    let path = run_dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(LabError::io(&path))?;
    #[derive(serde::Deserialize)]
    struct Head {
        config: ExperimentConfig,
        seed: u64,
    }
    let head: Head = serde_json::from_slice(&bytes)?;
    Ok((head.config, head.seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub ft_iter: usize,
    pub ood_accuracy: f64,
    pub is_best: bool,
}

/// Held-out accuracy at every fine-tuning checkpoint of a seed directory,
/// written to `ood_curve.csv`. The flagged point is the first argmax among
/// iterations after the start (or the start itself if it is the only one).
pub fn ood_curve(run_dir: &Path) -> LabResult<Vec<CurvePoint>> {
    let (cfg, seed) = load_manifest(run_dir)?;
    let corpus = Corpus::generate(&cfg.vocab_spec(), cfg.beta, seed)?;
    let ft_dir = run_dir.join("finetune");
    let mut iters: Vec<usize> = match fs::read_dir(&ft_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_prefix("ckpt_")?.parse().ok())
            .collect(),
        Err(_) => Vec::new(),
    };
    if iters.is_empty() {
        return Err(LabError::MissingCheckpoints(ft_dir));
    }
    iters.sort_unstable();
    let mut points = Vec::with_capacity(iters.len());
    for t in iters {
        let path = ft_dir.join(format!("ckpt_{t}"));
        let ckpt = factlab::io::load_checkpoint(&path)?;
        points.push(CurvePoint {
            ft_iter: t,
            ood_accuracy: accuracy(&ckpt.params, &corpus.table, &corpus.heldout)?,
            is_best: false,
        });
    }
    let candidates = if points.len() > 1 && points[0].ft_iter == 0 {
        1
    } else {
        0
    };
    let mut best = candidates;
    for i in candidates..points.len() {
        if points[i].ood_accuracy > points[best].ood_accuracy {
            best = i;
        }
    }
    points[best].is_best = true;
    let mut csv = String::from("ft_iter,ood_accuracy,is_best\n");
    for p in &points {
        csv.push_str(&format!("{},{},{}\n", p.ft_iter, p.ood_accuracy, p.is_best));
    }
    write(&run_dir.join("ood_curve.csv"), csv.as_bytes())?;
    Ok(points)
}
