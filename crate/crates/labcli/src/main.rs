use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factlab::corpus::Corpus;
use factlab_cli::experiment::{
    eval_checkpoint, finetune_only, ood_curve, pretrain_only, run_experiment, seed_dir, write_data,
};
use factlab_cli::gradcheck::grad_check;
use factlab_cli::sweep::{run_sweep, Axis, SweepSpec};
use factlab_cli::{ExperimentConfig, LabError, LabResult};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "factlab",
    version,
    about = "Knowledge acquisition and extraction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary and datasets.
    GenData(Common),
    /// Pre-train and write checkpoints, trace and metrics.
    Pretrain(Common),
    /// Fine-tune from a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to the last pre-training checkpoint of the seed.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print its metrics as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate, pre-train, fine-tune and evaluate every seed.
    Run(Common),
    /// Sweep one config axis over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// k, beta, r_size or n_freq
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Held-out accuracy at every fine-tuning checkpoint of a seed directory.
    OodCurve {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn load(common: &Common) -> LabResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| LabError::Io {
                path: path.clone(),
                source,
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> LabResult<serde_json::Value> {
    Ok(match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let mut dirs = Vec::new();
            for &s in &cfg.seeds {
                let corpus = Corpus::generate(&cfg.vocab_spec(), cfg.beta, s).map_err(LabError::from)?;
                let dir = seed_dir(&cfg, s).join("data");
                write_data(&corpus, &dir)?;
                dirs.push(dir);
            }
            json!({ "data_dirs": dirs })
        }
        Command::Pretrain(c) => {
            let cfg = load(&c)?;
            let ckpts = cfg
                .seeds
                .iter()
                .map(|&s| pretrain_only(&cfg, s))
                .collect::<LabResult<Vec<_>>>()?;
            json!({ "checkpoints": ckpts })
        }
        Command::Finetune { common, from } => {
            let cfg = load(&common)?;
            let mut out = Vec::new();
            for &s in &cfg.seeds {
                let from = from
                    .clone()
                    .unwrap_or_else(|| seed_dir(&cfg, s).join("pretrain").join(format!("ckpt_{}", cfg.t_p)));
                let ft = finetune_only(&cfg, s, &from)?;
                out.push(json!({ "seed": s, "best_iteration": ft.best_iteration, "ood_accuracy": ft.best_score }));
            }
            json!({ "runs": out })
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let seed = cfg.seeds[0];
            serde_json::to_value(eval_checkpoint(&cfg, seed, &checkpoint)?)?
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            let runs = run_experiment(&cfg)?;
            let out: Vec<_> = runs
                .iter()
                .map(|r| {
                    json!({
                        "seed": r.seed,
                        "dir": r.dir,
                        "train_loss": r.final_pretrain_loss(),
                        "entropy": r.entropy,
                        "best_iteration": r.best_iteration,
                        "ood_accuracy": r.ood_accuracy(),
                    })
                })
                .collect();
            json!({ "runs": out })
        }
        Command::Sweep { common, axis, values } => {
            let spec = SweepSpec {
                axis: axis.parse::<Axis>()?,
                values,
                base: load(&common)?,
            };
            let s = run_sweep(&spec)?;
            let points: Vec<_> = s
                .points
                .iter()
                .map(|p| json!({ "axis_value": p.axis_value, "n_ok": p.n_ok, "mean": p.mean, "sd": p.sd }))
                .collect();
            json!({ "axis": s.axis, "points": points })
        }
        Command::OodCurve { run_dir } => {
            let pts = ood_curve(&run_dir)?;
            let best = pts.iter().find(|p| p.is_best).map(|p| p.ft_iter);
            json!({ "points": pts.len(), "best_iteration": best, "csv": run_dir.join("ood_curve.csv") })
        }
        Command::GradCheck { seed, instances } => serde_json::to_value(grad_check(seed, instances))?,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
