//! Experiment configuration: a flat `key = value` text format.
//!
//! ```text
//! # comment
//! d = 128
//! seeds = 0, 1, 2
//! eta_f = auto
//! ```
//!
//! Every key is optional; unknown keys, duplicates and unparsable values are
//! errors that name the line and the field.

use std::fmt;
use std::path::PathBuf;

use factlab::corpus::VocabSpec;
use factlab::model::ModelSpec;
use factlab::optimize::{fine_tune_rate, LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based; 0 when the error concerns the config as a whole.
    pub line: usize,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, &self.field) {
            (0, Some(k)) => write!(f, "field `{k}`: {}", self.message),
            (0, None) => write!(f, "{}", self.message),
            (l, Some(k)) => write!(f, "line {l}, field `{k}`: {}", self.message),
            (l, None) => write!(f, "line {l}: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n_freq: usize,
    pub n_rare: usize,
    pub k: usize,
    pub r_size: usize,
    pub beta: f64,
    pub m: usize,
    pub lambda: f64,
    pub sigma0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub h1: usize,
    pub h2: usize,
    pub t_p: usize,
    /// `None` means `m |R| / lambda^2`.
    pub eta_f: Option<f64>,
    pub t_f: usize,
    /// Rank-1 instead of full fine-tuning.
    pub lowrank: bool,
    pub reweight_rare: bool,
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    /// Fine-tuning checkpoint interval; 0 keeps only the last one.
    pub ckpt_every: usize,
    /// Pre-training checkpoint interval; 0 keeps only the last one.
    pub pretrain_ckpt_every: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = LrSchedule::default();
        Self {
            d: 128,
            n_freq: 40,
            n_rare: 10,
            k: 3,
            r_size: 6,
            beta: 0.5,
            m: 100,
            lambda: 200.0,
            sigma0: 1e-3,
            eta1: s.eta1,
            eta2: s.eta2,
            eta3: s.eta3,
            h1: s.h1,
            h2: s.h2,
            t_p: 10003,
            eta_f: None,
            t_f: 2000,
            lowrank: false,
            reweight_rare: true,
            eval_every: 100,
            seeds: vec![0],
            ckpt_every: 100,
            pretrain_ckpt_every: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "d",
    "n_freq",
    "n_rare",
    "k",
    "r_size",
    "beta",
    "m",
    "lambda",
    "sigma0",
    "eta1",
    "eta2",
    "eta3",
    "h1",
    "h2",
    "t_p",
    "eta_f",
    "t_f",
    "lowrank",
    "reweight_rare",
    "eval_every",
    "seeds",
    "ckpt_every",
    "pretrain_ckpt_every",
    "out_dir",
];

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |field: Option<&str>, message: String| ConfigError {
                line,
                field: field.map(str::to_owned),
                message,
            };
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(None, format!("expected `key = value`, got {content:?}")));
            };
            let key = key.trim();
            let value = value.trim();
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(err(Some(key), "unknown key".into()));
            };
            if seen.contains(&known) {
                return Err(err(Some(key), "set more than once".into()));
            }
            seen.push(known);
            cfg.set(known, value).map_err(|m| err(Some(key), m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "d" => self.d = parse_num(v)?,
            "n_freq" => self.n_freq = parse_num(v)?,
            "n_rare" => self.n_rare = parse_num(v)?,
            "k" => self.k = parse_num(v)?,
            "r_size" => self.r_size = parse_num(v)?,
            "beta" => self.beta = parse_num(v)?,
            "m" => self.m = parse_num(v)?,
            "lambda" => self.lambda = parse_num(v)?,
            "sigma0" => self.sigma0 = parse_num(v)?,
            "eta1" => self.eta1 = parse_num(v)?,
            "eta2" => self.eta2 = parse_num(v)?,
            "eta3" => self.eta3 = parse_num(v)?,
            "h1" => self.h1 = parse_num(v)?,
            "h2" => self.h2 = parse_num(v)?,
            "t_p" => self.t_p = parse_num(v)?,
            "eta_f" => self.eta_f = if v == "auto" { None } else { Some(parse_num(v)?) },
            "t_f" => self.t_f = parse_num(v)?,
            "lowrank" => self.lowrank = parse_bool(v)?,
            "reweight_rare" => self.reweight_rare = parse_bool(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse_num::<u64>(s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "ckpt_every" => self.ckpt_every = parse_num(v)?,
            "pretrain_ckpt_every" => self.pretrain_ckpt_every = parse_num(v)?,
            "out_dir" => {
                if v.is_empty() {
                    return Err("must not be empty".into());
                }
                self.out_dir = PathBuf::from(v)
            }
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    /// Serializes back to the text format; `parse` of the result is `self`.
    pub fn to_text(&self) -> String {
        let eta_f = self.eta_f.map_or_else(|| "auto".to_owned(), |v| v.to_string());
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
        let vals: Vec<(&str, String)> = vec![
            ("d", self.d.to_string()),
            ("n_freq", self.n_freq.to_string()),
            ("n_rare", self.n_rare.to_string()),
            ("k", self.k.to_string()),
            ("r_size", self.r_size.to_string()),
            ("beta", self.beta.to_string()),
            ("m", self.m.to_string()),
            ("lambda", self.lambda.to_string()),
            ("sigma0", self.sigma0.to_string()),
            ("eta1", self.eta1.to_string()),
            ("eta2", self.eta2.to_string()),
            ("eta3", self.eta3.to_string()),
            ("h1", self.h1.to_string()),
            ("h2", self.h2.to_string()),
            ("t_p", self.t_p.to_string()),
            ("eta_f", eta_f),
            ("t_f", self.t_f.to_string()),
            ("lowrank", self.lowrank.to_string()),
            ("reweight_rare", self.reweight_rare.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seeds", seeds),
            ("ckpt_every", self.ckpt_every.to_string()),
            ("pretrain_ckpt_every", self.pretrain_ckpt_every.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        vals.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let whole = |field: &str, message: String| ConfigError {
            line: 0,
            field: Some(field.to_owned()),
            message,
        };
        self.vocab_spec().validate().map_err(|e| whole("d", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(whole("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        if self.m == 0 {
            return Err(whole("m", "must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(whole("lambda", format!("must be positive, got {}", self.lambda)));
        }
        if self.eval_every == 0 {
            return Err(whole("eval_every", "must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(whole("seeds", "must list at least one seed".into()));
        }
        if self.eta_f.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(whole("eta_f", "must be non-negative".into()));
        }
        self.train_config(0)
            .validate()
            .map_err(|e| whole("eta1", e.to_string()))?;
        Ok(())
    }

    pub fn vocab_spec(&self) -> VocabSpec {
        VocabSpec {
            n_freq: self.n_freq,
            n_rare: self.n_rare,
            k: self.k,
            r_size: self.r_size,
            dim: self.d,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            dim: self.d,
            m: self.m,
            lambda: self.lambda,
        }
    }

    pub fn effective_eta_f(&self) -> f64 {
        self.eta_f
            .unwrap_or_else(|| fine_tune_rate(self.m, self.r_size, self.lambda))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            t_p: self.t_p,
            schedule: LrSchedule {
                eta1: self.eta1,
                eta2: self.eta2,
                eta3: self.eta3,
                h1: self.h1,
                h2: self.h2,
            },
            eta_f: self.effective_eta_f(),
            t_f: self.t_f,
            lowrank: self.lowrank,
            reweight_rare: self.reweight_rare,
            sigma0: self.sigma0,
            seed,
            checkpoint_every: self.ckpt_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::default().effective_eta_f(), 0.015);
    }

    #[test]
    fn parses_values_and_comments() {
        let text = "# desk\n d = 200 \nseeds = 3, 4,5\neta_f = 0.2 # inline\nlowrank = true\n\nout_dir = /tmp/x\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.d, 200);
        assert_eq!(c.seeds, vec![3, 4, 5]);
        assert_eq!(c.eta_f, Some(0.2));
        assert!(c.lowrank);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let e = ExperimentConfig::parse("d = 64\nbogus = 1\n").unwrap_err();
        assert_eq!((e.line, e.field.as_deref()), (2, Some("bogus")));
        assert_eq!(e.to_string(), "line 2, field `bogus`: unknown key");

        let e = ExperimentConfig::parse("\n\nlowrank = yes").unwrap_err();
        assert_eq!((e.line, e.field.as_deref()), (3, Some("lowrank")));

        let e = ExperimentConfig::parse("k = 2\nk = 3").unwrap_err();
        assert_eq!(e.line, 2);

        let e = ExperimentConfig::parse("no equals sign").unwrap_err();
        assert_eq!((e.line, e.field.clone()), (1, None));

        let e = ExperimentConfig::parse("d = 8").unwrap_err();
        assert_eq!(e.line, 0);
        assert_eq!(e.field.as_deref(), Some("d"));

        assert!(ExperimentConfig::parse("h1 = 10\nh2 = 10").is_err());
        assert!(ExperimentConfig::parse("beta = 1.5").is_err());
        assert!(ExperimentConfig::parse("seeds = ").is_err());
        assert!(ExperimentConfig::parse("eval_every = 0").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let c = ExperimentConfig {
            eta_f: Some(0.125),
            seeds: vec![1, 9],
            lowrank: true,
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_text()).unwrap(), d);
    }
}
