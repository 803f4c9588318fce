//! Episodic flag -> label -> retrain benchmark.
//!
//! For every batch in order: the current model is scored on the whole batch
//! against oracle labels, the strategy flags inputs, the flagged inputs are
//! labeled, and the model is retrained on exactly those pairs before the next
//! batch arrives. Loss for batch `i` is therefore always measured before any
//! label from batch `i` is used.
//!
//! Rolling performance is stored as loss (lower is better); display code
//! negates it where a "performance" reading is wanted.

use std::path::Path;

use crate::datagen::{self, StreamConfig, Teacher};
use crate::error::{Error, Result};
use crate::experiment::Experiment;
use crate::nnet::{LabeledExample, Model, TrainOptions};
use crate::rng::derive_seed;
use crate::select::{self, SelectionResult, Strategy};
use crate::uq::{self, LowRankPosterior, PosteriorOptions};

pub const DEFAULT_RETRAIN_EPOCHS: usize = 200;
pub const DEFAULT_RETRAIN_LR: f64 = 1e-3;

/// Budget grid 5%, 10%, ..., 75%.
pub fn default_budgets() -> Vec<f64> {
    (1..=15).map(|i| i as f64 * 5.0 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleConfig {
    pub strategy: Strategy,
    /// Per-batch budget as a fraction of the batch size.
    pub budget_fraction: f64,
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    pub minibatch_size: usize,
    /// Refit the posterior after each retrain (only consulted by strategies
    /// that use it).
    pub posterior_refit: bool,
    pub posterior: PosteriorOptions,
    pub seed: u64,
}

impl LifecycleConfig {
    pub fn new(strategy: Strategy, budget_fraction: f64, posterior: PosteriorOptions, seed: u64) -> Self {
        Self {
            strategy,
            budget_fraction,
            retrain_epochs: DEFAULT_RETRAIN_EPOCHS,
            retrain_lr: DEFAULT_RETRAIN_LR,
            minibatch_size: 20,
            posterior_refit: true,
            posterior,
            seed,
        }
    }

    /// `k = floor(budget_fraction * batch_size)`.
    pub fn budget(&self, batch_size: usize) -> usize {
        // the epsilon keeps e.g. 0.35 * 20 = 6.999... from rounding down
        ((self.budget_fraction * batch_size as f64) + 1e-9).floor().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return Err(Error::Config(format!(
                "budget must lie in [0, 1], got {}",
                self.budget_fraction
            )));
        }
        if self.retrain_epochs == 0 {
            return Err(Error::Config("retrain_epochs must be positive".into()));
        }
        if !(self.retrain_lr.is_finite() && self.retrain_lr > 0.0) {
            return Err(Error::Config("retrain_lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub batch_index: usize,
    /// Mean loss on the full batch before any retraining it triggers.
    pub mean_loss: f64,
    pub num_flagged: usize,
    pub cumulative_cost: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleReport {
    pub strategy: Strategy,
    pub budget_fraction: f64,
    pub batch_size: usize,
    pub records: Vec<BatchRecord>,
    /// Filled in by [`normalize_improvement`] callers; `None` until then.
    pub avg_improvement_pct: Option<f64>,
    pub total_cost_pct: f64,
}

impl LifecycleReport {
    /// Mean of the per-batch losses over the whole lifetime.
    pub fn lifetime_mean_loss(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.mean_loss).sum::<f64>() / self.records.len() as f64
    }

    pub fn total_flagged(&self) -> usize {
        self.records.last().map_or(0, |r| r.cumulative_cost)
    }

    /// Per-batch losses.
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }
}

fn cost_pct(flagged: usize, num_batches: usize, batch_size: usize) -> f64 {
    if num_batches == 0 || batch_size == 0 {
        return 0.0;
    }
    100.0 * flagged as f64 / (num_batches * batch_size) as f64
}

/// Run the benchmark loop for one strategy over the whole stream.
pub fn run_lifecycle(exp: &Experiment, config: &LifecycleConfig) -> Result<LifecycleReport> {
    run_lifecycle_with(
        &exp.model,
        &exp.posterior,
        &exp.training_set,
        &exp.teacher,
        &exp.stream,
        config,
    )
}

pub fn run_lifecycle_with(
    model: &Model,
    posterior: &LowRankPosterior,
    training_set: &[LabeledExample],
    teacher: &Teacher,
    stream: &StreamConfig,
    config: &LifecycleConfig,
) -> Result<LifecycleReport> {
    config.validate()?;
    stream.validate()?;
    let mut model = model.clone();
    let mut posterior = posterior.clone();
    let mut labeled: Vec<LabeledExample> = Vec::new();
    let mut records = Vec::with_capacity(stream.num_batches);
    let mut cumulative = 0usize;
    let k = config.budget(stream.batch_size);

    for i in 0..stream.num_batches {
        let at = |e: Error| Error::AtBatch {
            batch: i,
            source: Box::new(e),
        };
        let batch = datagen::next_batch(stream, teacher, i)?;
        let examples = teacher.label_all(&batch.inputs)?;
        let mean_loss = model.mean_loss(&examples).map_err(at)?;

        let selection = flag_batch(&model, &posterior, &batch.inputs, config, k, i).map_err(at)?;
        let flagged: Vec<LabeledExample> = selection
            .flagged_indices()
            .into_iter()
            .map(|j| examples[j].clone())
            .collect();
        cumulative += flagged.len();
        records.push(BatchRecord {
            batch_index: i,
            mean_loss,
            num_flagged: flagged.len(),
            cumulative_cost: cumulative,
        });

        if flagged.is_empty() {
            continue;
        }
        model
            .train(
                &flagged,
                &TrainOptions {
                    epochs: config.retrain_epochs,
                    learning_rate: config.retrain_lr,
                    minibatch_size: config.minibatch_size,
                    seed: derive_seed(config.seed, 2 * i as u64 + 1),
                },
            )
            .map_err(at)?;
        labeled.extend(flagged);
        if config.posterior_refit && config.strategy.uses_posterior() {
            let mut data = training_set.to_vec();
            data.extend(labeled.iter().cloned());
            let opts = PosteriorOptions {
                seed: derive_seed(config.posterior.seed, i as u64),
                ..config.posterior
            };
            posterior = uq::fit_posterior(&model.arch, &model.weights, &data, &opts).map_err(at)?;
        }
    }

    let total_cost_pct = cost_pct(cumulative, stream.num_batches, stream.batch_size);
    Ok(LifecycleReport {
        strategy: config.strategy,
        budget_fraction: config.budget_fraction,
        batch_size: stream.batch_size,
        records,
        avg_improvement_pct: None,
        total_cost_pct,
    })
}

fn flag_batch(
    model: &Model,
    posterior: &LowRankPosterior,
    inputs: &[Vec<f64>],
    config: &LifecycleConfig,
    k: usize,
    batch_index: usize,
) -> Result<SelectionResult> {
    let m = inputs.len();
    let k = k.min(m);
    match config.strategy {
        Strategy::NaiveFalse => Ok(select::flag_naive(m, false)),
        Strategy::NaiveTrue => Ok(select::flag_naive(m, true)),
        Strategy::Random => {
            select::flag_random(m, k, derive_seed(config.seed, 2 * batch_index as u64))
        }
        Strategy::Scod => {
            let scores = inputs
                .iter()
                .map(|x| {
                    let l = uq::model_belief_update(&model.arch, &model.weights, x)?;
                    posterior.uncertainty(&l)
                })
                .collect::<Result<Vec<_>>>()?;
            select::flag_scod_k(&scores, k)
        }
        Strategy::Diverse => {
            let updates = inputs
                .iter()
                .map(|x| uq::model_belief_update(&model.arch, &model.weights, x))
                .collect::<Result<Vec<_>>>()?;
            Ok(select::flag_diverse(&select::build_kernel(&updates)?, k))
        }
    }
}

/// Lifetime improvement in percent, anchored at `baseline_false` (0) and
/// `baseline_true` (100).
pub fn normalize_improvement(
    report: &LifecycleReport,
    baseline_false: &LifecycleReport,
    baseline_true: &LifecycleReport,
) -> Result<f64> {
    let lf = baseline_false.lifetime_mean_loss();
    let lt = baseline_true.lifetime_mean_loss();
    let denom = lf - lt;
    if denom.abs() < 1e-12 {
        return Err(Error::UndefinedNormalization);
    }
    Ok(100.0 * (lf - report.lifetime_mean_loss()) / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub budget_pct: f64,
    pub cost_pct: f64,
    pub improvement_pct: f64,
}

/// Every (strategy, budget) cell on one experiment, normalized against the
/// naive baselines. Naive strategies contribute one row each, at budget 0
/// (`naive_false`) and 100 (`naive_true`). Rows are sorted by strategy name,
/// then budget.
pub fn budget_sweep(
    exp: &Experiment,
    base: &LifecycleConfig,
    strategies: &[Strategy],
    budgets: &[f64],
) -> Result<Vec<SweepRow>> {
    let run = |strategy: Strategy, budget: f64| {
        run_lifecycle(
            exp,
            &LifecycleConfig {
                strategy,
                budget_fraction: budget,
                ..base.clone()
            },
        )
    };
    let lo = run(Strategy::NaiveFalse, 0.0)?;
    let hi = run(Strategy::NaiveTrue, 1.0)?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        match strategy {
            Strategy::NaiveFalse => rows.push(SweepRow {
                strategy,
                budget_pct: 0.0,
                cost_pct: lo.total_cost_pct,
                improvement_pct: normalize_improvement(&lo, &lo, &hi)?,
            }),
            Strategy::NaiveTrue => rows.push(SweepRow {
                strategy,
                budget_pct: 100.0,
                cost_pct: hi.total_cost_pct,
                improvement_pct: normalize_improvement(&hi, &lo, &hi)?,
            }),
            _ => {
                for &b in budgets {
                    let report = run(strategy, b)?;
                    rows.push(SweepRow {
                        strategy,
                        budget_pct: round_pct(100.0 * b),
                        cost_pct: report.total_cost_pct,
                        improvement_pct: normalize_improvement(&report, &lo, &hi)?,
                    });
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

fn round_pct(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

pub fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.strategy
            .name()
            .cmp(b.strategy.name())
            .then(a.budget_pct.total_cmp(&b.budget_pct))
    });
}

pub const REPORT_HEADER: [&str; 6] = [
    "batch_index",
    "strategy",
    "budget",
    "mean_loss",
    "num_flagged",
    "cumulative_cost",
];

pub const SWEEP_HEADER: [&str; 4] = ["strategy", "budget_pct", "cost_pct", "improvement_pct"];

pub fn write_report_csv(path: &Path, report: &LifecycleReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in &report.records {
        w.write_record([
            r.batch_index.to_string(),
            report.strategy.name().to_string(),
            report.budget_fraction.to_string(),
            r.mean_loss.to_string(),
            r.num_flagged.to_string(),
            r.cumulative_cost.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            r.budget_pct.to_string(),
            r.cost_pct.to_string(),
            r.improvement_pct.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
