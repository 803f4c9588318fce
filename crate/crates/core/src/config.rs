//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default; unknown or repeated keys are rejected. The
//! manifest written next to run artifacts uses the same format and lists
//! every key with its resolved value, so a manifest is itself a valid config.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bench::{self, LifecycleConfig};
use crate::datagen::StreamConfig;
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig};
use crate::nnet::{Activation, Architecture};
use crate::select::Strategy;
use crate::uq::{self, FitMode, PosteriorOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub output_noise_sigma: f64,
    pub teacher_gain: f64,

    pub train_size: usize,
    pub train_noise_sigma: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub minibatch_size: usize,

    pub num_batches: usize,
    pub batch_size: usize,
    pub regime_mix: [f64; 3],
    pub degradation_max: f64,
    pub shift_magnitude: f64,
    pub corruption_gain: f64,

    pub strategy: Strategy,
    pub budget: f64,
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    pub posterior_refit: bool,

    pub rank: usize,
    pub epsilon: f64,
    pub fit_mode: FitMode,

    pub budgets: Vec<f64>,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        let stream = StreamConfig::default();
        Self {
            d_in: exp.d_in,
            d_out: exp.d_out,
            hidden_widths: exp.hidden_widths,
            activation: exp.activation,
            output_noise_sigma: Architecture::DEFAULT_NOISE_SIGMA,
            teacher_gain: exp.teacher_gain,
            train_size: exp.train_size,
            train_noise_sigma: exp.train_noise_sigma,
            pretrain_epochs: exp.pretrain_epochs,
            pretrain_lr: exp.pretrain_lr,
            minibatch_size: exp.minibatch_size,
            num_batches: stream.num_batches,
            batch_size: stream.batch_size,
            regime_mix: stream.regime_mix,
            degradation_max: stream.degradation_max,
            shift_magnitude: stream.shift_magnitude,
            corruption_gain: stream.corruption_gain,
            strategy: Strategy::Diverse,
            budget: 0.5,
            retrain_epochs: bench::DEFAULT_RETRAIN_EPOCHS,
            retrain_lr: bench::DEFAULT_RETRAIN_LR,
            posterior_refit: true,
            rank: uq::DEFAULT_MAX_RANK,
            epsilon: uq::DEFAULT_PRIOR_SCALE,
            fit_mode: FitMode::Exact,
            budgets: bench::default_budgets(),
            output_dir: PathBuf::from("out"),
            seeds: vec![0],
        }
    }
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_in" => self.d_in = parse_scalar(key, value)?,
            "d_out" => self.d_out = parse_scalar(key, value)?,
            "hidden_widths" => self.hidden_widths = parse_list(key, value)?,
            "activation" => self.activation = value.parse()?,
            "output_noise_sigma" => self.output_noise_sigma = parse_scalar(key, value)?,
            "teacher_gain" => self.teacher_gain = parse_scalar(key, value)?,
            "train_size" => self.train_size = parse_scalar(key, value)?,
            "train_noise_sigma" => self.train_noise_sigma = parse_scalar(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_scalar(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse_scalar(key, value)?,
            "minibatch_size" => self.minibatch_size = parse_scalar(key, value)?,
            "num_batches" => self.num_batches = parse_scalar(key, value)?,
            "batch_size" => self.batch_size = parse_scalar(key, value)?,
            "regime_mix" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.regime_mix = v.try_into().map_err(|v: Vec<f64>| {
                    Error::Config(format!("regime_mix: expected 3 entries, got {}", v.len()))
                })?;
            }
            "degradation_max" => self.degradation_max = parse_scalar(key, value)?,
            "shift_magnitude" => self.shift_magnitude = parse_scalar(key, value)?,
            "corruption_gain" => self.corruption_gain = parse_scalar(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "budget" => self.budget = parse_budget(value)?,
            "retrain_epochs" => self.retrain_epochs = parse_scalar(key, value)?,
            "retrain_lr" => self.retrain_lr = parse_scalar(key, value)?,
            "posterior_refit" => self.posterior_refit = parse_bool(key, value)?,
            "rank" => self.rank = parse_scalar(key, value)?,
            "epsilon" => self.epsilon = parse_scalar(key, value)?,
            "fit_mode" => self.fit_mode = value.parse()?,
            "budgets" => {
                self.budgets = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse_budget)
                    .collect::<Result<_>>()?
            }
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "seeds" => self.seeds = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_in", self.d_in.to_string()),
            ("d_out", self.d_out.to_string()),
            ("hidden_widths", join(&self.hidden_widths)),
            ("activation", self.activation.to_string()),
            ("output_noise_sigma", self.output_noise_sigma.to_string()),
            ("teacher_gain", self.teacher_gain.to_string()),
            ("train_size", self.train_size.to_string()),
            ("train_noise_sigma", self.train_noise_sigma.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("minibatch_size", self.minibatch_size.to_string()),
            ("num_batches", self.num_batches.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("regime_mix", join(&self.regime_mix)),
            ("degradation_max", self.degradation_max.to_string()),
            ("shift_magnitude", self.shift_magnitude.to_string()),
            ("corruption_gain", self.corruption_gain.to_string()),
            ("strategy", self.strategy.to_string()),
            ("budget", self.budget.to_string()),
            ("retrain_epochs", self.retrain_epochs.to_string()),
            ("retrain_lr", self.retrain_lr.to_string()),
            ("posterior_refit", self.posterior_refit.to_string()),
            ("rank", self.rank.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("fit_mode", self.fit_mode.to_string()),
            ("budgets", join(&self.budgets)),
            ("output_dir", self.output_dir.display().to_string()),
            ("seeds", join(&self.seeds)),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment_config().architecture()?;
        self.stream_config().validate()?;
        self.lifecycle_config(0).validate()?;
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be positive".into()));
        }
        if !(self.teacher_gain.is_finite() && self.teacher_gain > 0.0) {
            return Err(Error::Config("teacher_gain must be positive".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.train_noise_sigma.is_finite() && self.train_noise_sigma >= 0.0) {
            return Err(Error::Config("train_noise_sigma must be nonnegative".into()));
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0) {
            return Err(Error::Config("pretrain_lr must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            num_batches: self.num_batches,
            batch_size: self.batch_size,
            regime_mix: self.regime_mix,
            degradation_max: self.degradation_max,
            shift_magnitude: self.shift_magnitude,
            corruption_gain: self.corruption_gain,
            seed: 0,
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            d_in: self.d_in,
            d_out: self.d_out,
            hidden_widths: self.hidden_widths.clone(),
            activation: self.activation,
            output_noise_sigma: self.output_noise_sigma,
            teacher_gain: self.teacher_gain,
            train_size: self.train_size,
            train_noise_sigma: self.train_noise_sigma,
            pretrain_epochs: self.pretrain_epochs,
            pretrain_lr: self.pretrain_lr,
            minibatch_size: self.minibatch_size,
            rank: self.rank,
            prior_scale: self.epsilon,
            fit_mode: self.fit_mode,
            stream: self.stream_config(),
        }
    }

    /// Lifecycle settings for one master seed.
    pub fn lifecycle_config(&self, master_seed: u64) -> LifecycleConfig {
        let exp = self.experiment_config();
        let rank = exp
            .architecture()
            .map(|a| exp.effective_rank(&a, self.train_size))
            .unwrap_or(0);
        LifecycleConfig {
            strategy: self.strategy,
            budget_fraction: self.budget,
            retrain_epochs: self.retrain_epochs,
            retrain_lr: self.retrain_lr,
            minibatch_size: self.minibatch_size,
            posterior_refit: self.posterior_refit,
            posterior: PosteriorOptions {
                rank,
                prior_scale: self.epsilon,
                mode: self.fit_mode,
                seed: experiment::lifecycle_seed(master_seed) ^ 0x5eed,
            },
            seed: experiment::lifecycle_seed(master_seed),
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

/// A budget as a fraction (`0.5`) or a percentage (`50%`).
pub fn parse_budget(value: &str) -> Result<f64> {
    let v = value.trim();
    let b = match v.strip_suffix('%') {
        Some(p) => parse_scalar::<f64>("budget", p)? / 100.0,
        None => parse_scalar::<f64>("budget", v)?,
    };
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::Config(format!("budget {v:?} outside [0, 1] (or 0%..100%)")));
    }
    Ok(b)
}
