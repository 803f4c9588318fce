//! Plain-Rust glue between Python-shaped values and the core types.

use dlm_core::bench::LifecycleReport;
use dlm_core::config::RunConfig;
use dlm_core::nnet::LabeledExample;
use dlm_core::{Error, Result};

/// Apply `key = value` overrides on top of the defaults and validate.
pub fn config_from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in pairs {
        cfg.set(k.as_ref(), v.as_ref())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Pair inputs with targets; targets may be omitted for posterior fitting,
/// where only the inputs matter.
pub fn examples(inputs: &[Vec<f64>], targets: Option<&[Vec<f64>]>, d_out: usize) -> Result<Vec<LabeledExample>> {
    if let Some(t) = targets {
        if t.len() != inputs.len() {
            return Err(Error::DimensionMismatch {
                what: "targets",
                expected: inputs.len(),
                got: t.len(),
            });
        }
    }
    Ok(inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = targets.map_or_else(|| vec![0.0; d_out], |t| t[i].clone());
            LabeledExample::new(x.clone(), y)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportData {
    pub strategy: String,
    pub budget: f64,
    pub losses: Vec<f64>,
    pub num_flagged: Vec<usize>,
    pub cumulative_cost: Vec<usize>,
    pub total_cost_pct: f64,
    pub lifetime_mean_loss: f64,
    pub avg_improvement_pct: Option<f64>,
}

impl From<&LifecycleReport> for ReportData {
    fn from(r: &LifecycleReport) -> Self {
        Self {
            strategy: r.strategy.name().to_string(),
            budget: r.budget_fraction,
            losses: r.losses(),
            num_flagged: r.records.iter().map(|b| b.num_flagged).collect(),
            cumulative_cost: r.records.iter().map(|b| b.cumulative_cost).collect(),
            total_cost_pct: r.total_cost_pct,
            lifetime_mean_loss: r.lifetime_mean_loss(),
            avg_improvement_pct: r.avg_improvement_pct,
        }
    }
}
