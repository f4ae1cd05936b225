//! One-axis sweeps over the experiment config.

use std::fmt;
use std::fs;
use std::str::FromStr;

use factlab::io::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, LabResult};
use crate::experiment::{run_seed, PretrainCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    K,
    Beta,
    RSize,
    NFreq,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::Beta => "beta",
            Axis::RSize => "r_size",
            Axis::NFreq => "n_freq",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> LabResult<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = || -> LabResult<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(LabError::InvalidSweep(format!(
                    "{} needs a non-negative integer, got {value}",
                    self.as_str()
                )))
            }
        };
        match self {
            Axis::K => cfg.k = count()?,
            Axis::Beta => cfg.beta = value,
            Axis::RSize => cfg.r_size = count()?,
            Axis::NFreq => cfg.n_freq = count()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = LabError;

    fn from_str(s: &str) -> LabResult<Self> {
        match s {
            "k" => Ok(Axis::K),
            "beta" => Ok(Axis::Beta),
            "r_size" => Ok(Axis::RSize),
            "n_freq" => Ok(Axis::NFreq),
            _ => Err(LabError::InvalidSweep(format!("unknown axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> LabResult<()> {
        if self.values.is_empty() {
            return Err(LabError::InvalidSweep("no values".into()));
        }
        for &v in &self.values {
            self.axis.apply(&self.base, v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub seed: u64,
    /// `Err` carries the error kind and message of a failed cell.
    pub outcome: Result<CellResult, (String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResult {
    pub ood_accuracy: f64,
    pub train_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub n_ok: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 with fewer than two cells.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

impl SweepSummary {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("axis_value,seed,ood_accuracy,train_loss,entropy,status\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(c) => out.push_str(&format!(
                    "{},{},{},{},{},ok\n",
                    r.axis_value, r.seed, c.ood_accuracy, c.train_loss, c.entropy
                )),
                Err((kind, _)) => out.push_str(&format!("{},{},,,,error:{kind}\n", r.axis_value, r.seed)),
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{},n_ok,mean_ood_accuracy,sd_ood_accuracy\n", self.axis);
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.axis_value, p.n_ok, p.mean, p.sd));
        }
        out
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    NonDecreasing,
    NonIncreasing,
}

/// Adjacent steps of `means` that move against `trend`, as magnitudes.
pub fn trend_inversions(means: &[f64], trend: Trend) -> Vec<f64> {
    means
        .windows(2)
        .map(|w| match trend {
            Trend::NonDecreasing => w[0] - w[1],
            Trend::NonIncreasing => w[1] - w[0],
        })
        .filter(|&drop| drop > 0.0 || drop.is_nan())
        .collect()
}

/// At most `max_count` inversions, none larger than `max_size`.
pub fn trend_holds(means: &[f64], trend: Trend, max_count: usize, max_size: f64) -> bool {
    let inv = trend_inversions(means, trend);
    inv.len() <= max_count && inv.iter().all(|&v| v <= max_size)
}

/// Runs every `(value, seed)` cell in memory, sharing pre-training between
/// cells whose pre-training inputs coincide. Failed cells are recorded and
/// the sweep goes on. When `write` is set, `sweep.csv` and `summary.csv`
/// go to `base.out_dir/sweep_<axis>/`.
pub fn run_sweep_with(spec: &SweepSpec, cache: &mut PretrainCache, write: bool) -> LabResult<SweepSummary> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &v in &spec.values {
        let cfg = spec.axis.apply(&spec.base, v)?;
        let mut ok = Vec::new();
        for &seed in &cfg.seeds {
            let outcome = match run_seed(&cfg, seed, None, Some(cache)) {
                Ok(run) => {
                    ok.push(run.ood_accuracy());
                    Ok(CellResult {
                        ood_accuracy: run.ood_accuracy(),
                        train_loss: run.final_pretrain_loss(),
                        entropy: run.entropy,
                    })
                }
                Err(e) => Err((e.kind().to_owned(), e.to_string())),
            };
            rows.push(SweepRow {
                axis_value: v,
                seed,
                outcome,
            });
        }
        let (mean, sd) = mean_sd(&ok);
        points.push(SweepPoint {
            axis_value: v,
            n_ok: ok.len(),
            mean,
            sd,
        });
    }
    let summary = SweepSummary {
        axis: spec.axis,
        rows,
        points,
    };
    if write {
        let dir = spec.base.out_dir.join(format!("sweep_{}", spec.axis));
        fs::create_dir_all(&dir).map_err(LabError::io(&dir))?;
        write_atomic(&dir.join("sweep.csv"), summary.rows_csv().as_bytes())?;
        write_atomic(&dir.join("summary.csv"), summary.summary_csv().as_bytes())?;
    }
    Ok(summary)
}

pub fn run_sweep(spec: &SweepSpec) -> LabResult<SweepSummary> {
    run_sweep_with(spec, &mut PretrainCache::default(), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_application() {
        let base = ExperimentConfig::default();
        assert_eq!("r_size".parse::<Axis>().unwrap(), Axis::RSize);
        assert!("width".parse::<Axis>().is_err());
        assert_eq!(Axis::K.apply(&base, 2.0).unwrap().k, 2);
        assert_eq!(Axis::Beta.apply(&base, 0.3).unwrap().beta, 0.3);
        assert!(Axis::K.apply(&base, 1.5).is_err());
        assert!(Axis::K.apply(&base, 7.0).is_err());
        assert!(Axis::Beta.apply(&base, 2.0).is_err());
    }

    #[test]
    fn mean_and_sample_sd() {
        assert_eq!(mean_sd(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert!(mean_sd(&[]).0.is_nan());
    }

    #[test]
    fn trend_counting() {
        use Trend::*;
        assert!(trend_inversions(&[0.1, 0.2, 0.2, 0.9], NonDecreasing).is_empty());
        assert_eq!(trend_inversions(&[0.5, 0.49, 0.6], NonDecreasing).len(), 1);
        assert!(trend_holds(&[0.5, 0.49, 0.6], NonDecreasing, 1, 0.02));
        assert!(!trend_holds(&[0.5, 0.45, 0.6], NonDecreasing, 1, 0.02));
        assert!(!trend_holds(&[0.5, 0.49, 0.6, 0.59], NonDecreasing, 1, 0.02));
        assert!(trend_holds(&[0.9, 0.5, 0.1], NonIncreasing, 0, 0.0));
        assert!(!trend_holds(&[0.1, f64::NAN], NonIncreasing, 1, 0.02));
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let spec = SweepSpec {
            axis: Axis::K,
            values: vec![],
            base: ExperimentConfig::default(),
        };
        assert!(matches!(spec.validate(), Err(LabError::InvalidSweep(_))));
    }
}
