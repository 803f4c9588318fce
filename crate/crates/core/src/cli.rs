//! `dlm` command-line front end.
//!
//! Verbs: `fit` trains the base model and fits its posterior for every seed,
//! `run` replays one strategy over the stream, `sweep` covers the whole
//! budget grid, `stream` exports the generated batches. Artifacts and reports
//! land in the output directory with per-seed file names.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{self, LifecycleReport, SweepRow};
use crate::config::{self, RunConfig};
use crate::datagen;
use crate::error::{Error, Result};
use crate::experiment::Experiment;
use crate::nnet::Model;
use crate::select::Strategy;
use crate::uq::LowRankPosterior;

#[derive(Debug, Parser)]
#[command(name = "dlm", version, about = "Flag, label and retrain benchmark for uncertainty-driven data selection")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated master seeds (overrides `seeds`).
    #[arg(long, global = true, value_name = "LIST")]
    pub seeds: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the model and fit the posterior for every seed.
    Fit,
    /// Run one strategy at one budget over the stream.
    Run {
        #[arg(long)]
        strategy: String,
        /// Fraction (`0.5`) or percentage (`50%`).
        #[arg(long)]
        budget: String,
    },
    /// Run every strategy over the budget grid.
    Sweep,
    /// Export the generated stream as CSV.
    Stream,
}

/// Resolve the configuration file and command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seeds) = &cli.seeds {
        cfg.set("seeds", seeds)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("model_seed{seed}.bin"))
}

pub fn posterior_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("posterior_seed{seed}.bin"))
}

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("manifest.txt")
}

fn budget_tag(budget: f64) -> String {
    format!("b{}", (budget * 100.0).round() as i64)
}

pub fn report_path(cfg: &RunConfig, strategy: Strategy, budget: f64, seed: u64) -> PathBuf {
    cfg.output_dir
        .join(format!("report_{}_{}_seed{seed}.csv", strategy.name(), budget_tag(budget)))
}

pub fn summary_path(cfg: &RunConfig, strategy: Strategy, budget: f64) -> PathBuf {
    cfg.output_dir
        .join(format!("summary_{}_{}.csv", strategy.name(), budget_tag(budget)))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_manifest(cfg: &RunConfig) -> Result<PathBuf> {
    let path = manifest_path(cfg);
    fs::write(&path, cfg.to_manifest()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Train and fit for every seed; returns the written paths.
pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_dir(&cfg.output_dir)?;
    let exp_cfg = cfg.experiment_config();
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let exp = Experiment::prepare(&exp_cfg, seed)?;
        let mp = model_path(cfg, seed);
        fs::write(&mp, exp.model.to_bytes()).map_err(|e| Error::io(&mp, e))?;
        let pp = posterior_path(cfg, seed);
        fs::write(&pp, exp.posterior.to_bytes()).map_err(|e| Error::io(&pp, e))?;
        written.push(mp);
        written.push(pp);
    }
    written.push(write_manifest(cfg)?);
    Ok(written)
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Rebuild the experiment for `seed` from the artifacts written by `fit`.
pub fn load_experiment(cfg: &RunConfig, seed: u64) -> Result<Experiment> {
    let exp_cfg = cfg.experiment_config();
    let model = Model::from_bytes(&read_artifact(&model_path(cfg, seed))?)?;
    let expected = exp_cfg.architecture()?;
    if model.arch != expected {
        return Err(Error::Config(format!(
            "{} was fitted for layer widths {:?} ({}), but the configuration asks for {:?} ({}); rerun `dlm fit`",
            model_path(cfg, seed).display(),
            model.arch.layer_widths(),
            model.arch.activation(),
            expected.layer_widths(),
            expected.activation(),
        )));
    }
    let posterior = LowRankPosterior::from_bytes(&read_artifact(&posterior_path(cfg, seed))?)?;
    if posterior.num_params() != model.arch.num_params() {
        return Err(Error::DimensionMismatch {
            what: "posterior basis rows",
            expected: model.arch.num_params(),
            got: posterior.num_params(),
        });
    }
    Experiment::from_artifacts(&exp_cfg, seed, model, posterior)
}

/// Median and interquartile range of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Spread {
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub reports: Vec<(u64, LifecycleReport)>,
    pub lifetime_loss: Spread,
    pub cost_pct: Spread,
    pub improvement_pct: Spread,
}

/// Run one strategy per seed from saved artifacts; writes per-seed report
/// CSVs and a summary CSV.
pub fn cmd_run(cfg: &RunConfig, strategy: Strategy, budget: f64) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.strategy = strategy;
    cfg.budget = budget;
    cfg.validate()?;
    let mut reports = Vec::new();
    let (mut losses, mut costs, mut gains) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let exp = load_experiment(&cfg, seed)?;
        let lc = cfg.lifecycle_config(seed);
        let mut report = bench::run_lifecycle(&exp, &lc)?;
        let anchor = |s: Strategy, b: f64| {
            bench::run_lifecycle(
                &exp,
                &bench::LifecycleConfig {
                    strategy: s,
                    budget_fraction: b,
                    ..lc.clone()
                },
            )
        };
        let lo = anchor(Strategy::NaiveFalse, 0.0)?;
        let hi = anchor(Strategy::NaiveTrue, 1.0)?;
        let gain = bench::normalize_improvement(&report, &lo, &hi)?;
        report.avg_improvement_pct = Some(gain);
        bench::write_report_csv(&report_path(&cfg, strategy, budget, seed), &report)?;
        losses.push(report.lifetime_mean_loss());
        costs.push(report.total_cost_pct);
        gains.push(gain);
        reports.push((seed, report));
    }
    let outcome = RunOutcome {
        reports,
        lifetime_loss: spread(&losses).ok_or(Error::EmptyData)?,
        cost_pct: spread(&costs).ok_or(Error::EmptyData)?,
        improvement_pct: spread(&gains).ok_or(Error::EmptyData)?,
    };
    write_summary(&summary_path(&cfg, strategy, budget), &outcome)?;
    Ok(outcome)
}

pub const SUMMARY_HEADER: [&str; 5] = ["metric", "median", "q1", "q3", "iqr"];

fn write_summary(path: &Path, outcome: &RunOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for (name, s) in [
        ("lifetime_mean_loss", outcome.lifetime_loss),
        ("cost_pct", outcome.cost_pct),
        ("improvement_pct", outcome.improvement_pct),
    ] {
        w.write_record([
            name.to_string(),
            s.median.to_string(),
            s.q1.to_string(),
            s.q3.to_string(),
            s.iqr().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Sweep every strategy over the budget grid per seed; writes
/// `sweep_seed{s}.csv` and the seed-median `sweep.csv`, returns the latter.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let exp = load_experiment(cfg, seed)?;
        let rows = bench::budget_sweep(&exp, &cfg.lifecycle_config(seed), &Strategy::ALL, &cfg.budgets)?;
        bench::write_sweep_csv(&cfg.output_dir.join(format!("sweep_seed{seed}.csv")), &rows)?;
        per_seed.push(rows);
    }
    let merged = median_rows(&per_seed);
    bench::write_sweep_csv(&cfg.output_dir.join("sweep.csv"), &merged)?;
    Ok(merged)
}

/// Cell-wise median across seeds; every seed must share the same grid.
pub fn median_rows(per_seed: &[Vec<SweepRow>]) -> Vec<SweepRow> {
    let Some(first) = per_seed.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let med = |f: fn(&SweepRow) -> f64| {
                let v: Vec<f64> = per_seed.iter().map(|rows| f(&rows[i])).collect();
                spread(&v).map_or(f64::NAN, |s| s.median)
            };
            SweepRow {
                strategy: row.strategy,
                budget_pct: row.budget_pct,
                cost_pct: med(|r| r.cost_pct),
                improvement_pct: med(|r| r.improvement_pct),
            }
        })
        .collect()
}

pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:<12} {:>9} {:>9} {:>14}\n", "strategy", "budget_%", "cost_%", "improvement_%");
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>9.0} {:>9.1} {:>14.1}\n",
            r.strategy.name(),
            r.budget_pct,
            r.cost_pct,
            r.improvement_pct
        ));
    }
    out
}

/// Write `stream_seed{s}.csv` for every seed.
pub fn cmd_stream(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_dir(&cfg.output_dir)?;
    let exp_cfg = cfg.experiment_config();
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let stream = exp_cfg.stream_for(seed);
        let batches = (0..stream.num_batches)
            .map(|i| datagen::generate_batch(&stream, cfg.d_in, i))
            .collect::<Result<Vec<_>>>()?;
        let path = cfg.output_dir.join(format!("stream_seed{seed}.csv"));
        datagen::write_stream_csv(&path, &batches)?;
        written.push(path);
    }
    Ok(written)
}

fn execute(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let say = |out: &mut dyn std::io::Write, text: String| {
        // a closed stdout is not worth failing the run over
        let _ = out.write_all(text.as_bytes());
    };
    match &cli.command {
        Command::Fit => {
            for p in cmd_fit(&cfg)? {
                say(stdout, format!("wrote {}\n", p.display()));
            }
        }
        Command::Run { strategy, budget } => {
            let strategy: Strategy = strategy.parse()?;
            let budget = config::parse_budget(budget)?;
            let outcome = cmd_run(&cfg, strategy, budget)?;
            for (seed, report) in &outcome.reports {
                say(
                    stdout,
                    format!(
                        "seed {seed}: lifetime loss {:.4}, cost {:.1}%, improvement {:.1}%\n",
                        report.lifetime_mean_loss(),
                        report.total_cost_pct,
                        report.avg_improvement_pct.unwrap_or(f64::NAN)
                    ),
                );
            }
            for (name, s) in [
                ("lifetime loss", outcome.lifetime_loss),
                ("cost %", outcome.cost_pct),
                ("improvement %", outcome.improvement_pct),
            ] {
                say(
                    stdout,
                    format!("{name:<14} median {:>10.4}  IQR {:>10.4}\n", s.median, s.iqr()),
                );
            }
        }
        Command::Sweep => {
            let rows = cmd_sweep(&cfg)?;
            say(stdout, format_sweep_table(&rows));
        }
        Command::Stream => {
            for p in cmd_stream(&cfg)? {
                say(stdout, format!("wrote {}\n", p.display()));
            }
        }
    }
    Ok(())
}

/// Parse `args`, run the verb and return the process exit code:
/// 0 success, 1 configuration error, 2 runtime error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(()) => {
            let _ = stdout.flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}
