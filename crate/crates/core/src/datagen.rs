//! Synthetic evolving input stream labeled by a frozen teacher network.
//!
//! Inputs are standard normal in distribution. Two out-of-distribution
//! regimes perturb them: `shifted` adds a fixed offset to the first half of
//! the coordinates, and `corrupted` amplifies a random contiguous block.
//! On top of the regime, a sensor-degradation schedule zeroes coordinates
//! with a probability that grows linearly from zero at the first batch to
//! `degradation_max` at the last.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nnet::{Activation, Architecture, LabeledExample, Model, WeightVector};
use crate::rng;

pub const DEFAULT_D_IN: usize = 16;
pub const DEFAULT_D_OUT: usize = 2;
/// Output-layer scale of the teacher. Small targets keep the default student
/// stable at the protocol learning rate.
pub const TEACHER_OUTPUT_GAIN: f64 = 0.3;
pub const DEFAULT_TRAINING_SIZE: usize = 300;
pub const DEFAULT_SHIFT: f64 = 3.0;
pub const DEFAULT_CORRUPTION_GAIN: f64 = 3.0;
pub const MAX_DEGRADATION: f64 = 0.1;
pub const TEACHER_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegimeKind {
    InDistribution,
    Shifted,
    Corrupted,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 3] = [
        RegimeKind::InDistribution,
        RegimeKind::Shifted,
        RegimeKind::Corrupted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::InDistribution => "in_distribution",
            RegimeKind::Shifted => "shifted",
            RegimeKind::Corrupted => "corrupted",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegimeKind::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    pub kind: RegimeKind,
    pub shift_vector: Vec<f64>,
    pub corruption_gain: f64,
}

impl Regime {
    pub fn in_distribution(d_in: usize) -> Self {
        Self {
            kind: RegimeKind::InDistribution,
            shift_vector: vec![0.0; d_in],
            corruption_gain: 1.0,
        }
    }

    /// Offset of `magnitude` on the first `ceil(d_in / 2)` coordinates.
    pub fn shifted(d_in: usize, magnitude: f64) -> Self {
        let half = d_in.div_ceil(2);
        Self {
            kind: RegimeKind::Shifted,
            shift_vector: (0..d_in).map(|i| if i < half { magnitude } else { 0.0 }).collect(),
            corruption_gain: 1.0,
        }
    }

    pub fn corrupted(d_in: usize, gain: f64) -> Self {
        Self {
            kind: RegimeKind::Corrupted,
            shift_vector: vec![0.0; d_in],
            corruption_gain: gain,
        }
    }
}

/// Length of the amplified coordinate block in the corrupted regime.
pub fn corruption_block_len(d_in: usize) -> usize {
    d_in.div_ceil(4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub num_batches: usize,
    pub batch_size: usize,
    /// Probabilities of in-distribution, shifted, corrupted.
    pub regime_mix: [f64; 3],
    pub degradation_max: f64,
    pub shift_magnitude: f64,
    pub corruption_gain: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_batches: 100,
            batch_size: 20,
            regime_mix: [1.0 / 3.0; 3],
            degradation_max: MAX_DEGRADATION,
            shift_magnitude: DEFAULT_SHIFT,
            corruption_gain: DEFAULT_CORRUPTION_GAIN,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_batches == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "num_batches and batch_size must be positive".into(),
            ));
        }
        if self.regime_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config(format!(
                "regime_mix entries must be nonnegative, got {:?}",
                self.regime_mix
            )));
        }
        let total: f64 = self.regime_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "regime_mix must sum to 1, got {total}"
            )));
        }
        if !(0.0..=MAX_DEGRADATION).contains(&self.degradation_max) {
            return Err(Error::Config(format!(
                "degradation_max must lie in [0, {MAX_DEGRADATION}], got {}",
                self.degradation_max
            )));
        }
        if !(self.corruption_gain.is_finite() && self.corruption_gain > 0.0) {
            return Err(Error::Config("corruption_gain must be positive".into()));
        }
        if !self.shift_magnitude.is_finite() {
            return Err(Error::Config("shift_magnitude must be finite".into()));
        }
        Ok(())
    }

    pub fn regimes(&self, d_in: usize) -> [Regime; 3] {
        [
            Regime::in_distribution(d_in),
            Regime::shifted(d_in, self.shift_magnitude),
            Regime::corrupted(d_in, self.corruption_gain),
        ]
    }

    /// Per-coordinate zeroing probability for a batch.
    pub fn degradation_probability(&self, batch_index: usize) -> f64 {
        if self.num_batches <= 1 {
            return 0.0;
        }
        self.degradation_max * batch_index as f64 / (self.num_batches - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_index: usize,
    pub inputs: Vec<Vec<f64>>,
    /// Ground-truth regime of each input, for analysis only.
    pub regime_tags: Vec<RegimeKind>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Frozen labeling network.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    model: Model,
}

impl Teacher {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn input_dim(&self) -> usize {
        self.model.arch.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.model.arch.output_dim()
    }

    /// Noiseless teacher output.
    pub fn label(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.forward(x)?.mean.as_slice().to_vec())
    }

    pub fn label_all(&self, inputs: &[Vec<f64>]) -> Result<Vec<LabeledExample>> {
        inputs
            .iter()
            .map(|x| Ok(LabeledExample::new(x.clone(), self.label(x)?)))
            .collect()
    }
}

/// Random `d_in -> 32 -> 32 -> d_out` tanh network with Gaussian weights of
/// variance `1 / fan_in` and small Gaussian biases, output layer scaled by
/// [`TEACHER_OUTPUT_GAIN`].
pub fn make_teacher(d_in: usize, d_out: usize, seed: u64) -> Result<Teacher> {
    make_teacher_with_gain(d_in, d_out, TEACHER_OUTPUT_GAIN, seed)
}

/// As [`make_teacher`] with an explicit output-layer gain.
pub fn make_teacher_with_gain(d_in: usize, d_out: usize, gain: f64, seed: u64) -> Result<Teacher> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::Config(format!("teacher gain must be positive, got {gain}")));
    }
    let arch = Architecture::new(
        vec![d_in, TEACHER_HIDDEN, TEACHER_HIDDEN, d_out],
        Activation::Tanh,
        1.0,
    )?;
    let mut rng = rng::seeded(seed);
    let widths = arch.layer_widths().to_vec();
    let last = widths.len() - 2;
    let mut values = Vec::with_capacity(arch.num_params());
    for (layer, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = if layer == last { gain } else { 1.0 };
        let std = scale / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(std * rng::standard_normal(&mut rng));
        }
        for _ in 0..fan_out {
            values.push(0.1 * scale * rng::standard_normal(&mut rng));
        }
    }
    let weights = WeightVector::new(values)?;
    Ok(Teacher {
        model: Model::new(arch, weights)?,
    })
}

/// In-distribution training examples with Gaussian label noise.
pub fn training_set(
    teacher: &Teacher,
    n: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut rng = rng::seeded(seed);
    let d_in = teacher.input_dim();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d_in).map(|_| rng::standard_normal(&mut rng)).collect();
            let mut y = teacher.label(&x)?;
            if noise_sigma > 0.0 {
                for v in y.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            Ok(LabeledExample::new(x, y))
        })
        .collect()
}

/// Batch `batch_index` of the stream; a pure function of
/// `(config, d_in, batch_index)`.
pub fn next_batch(config: &StreamConfig, teacher: &Teacher, batch_index: usize) -> Result<Batch> {
    generate_batch(config, teacher.input_dim(), batch_index)
}

pub fn generate_batch(config: &StreamConfig, d_in: usize, batch_index: usize) -> Result<Batch> {
    if batch_index >= config.num_batches {
        return Err(Error::BatchIndexOutOfRange {
            index: batch_index,
            len: config.num_batches,
        });
    }
    let mut rng = rng::seeded(rng::derive_seed(config.seed, batch_index as u64));
    let regimes = config.regimes(d_in);
    let p_zero = config.degradation_probability(batch_index);
    let block = corruption_block_len(d_in);
    let mut inputs = Vec::with_capacity(config.batch_size);
    let mut tags = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let u: f64 = rng.random();
        let kind = draw_regime(&config.regime_mix, u);
        let regime = &regimes[kind.index()];
        let mut x: Vec<f64> = (0..d_in)
            .map(|i| rng::standard_normal(&mut rng) + regime.shift_vector[i])
            .collect();
        if kind == RegimeKind::Corrupted {
            let start = rng.random_range(0..=d_in - block);
            for v in &mut x[start..start + block] {
                *v *= regime.corruption_gain;
            }
        }
        if p_zero > 0.0 {
            for v in x.iter_mut() {
                if rng.random::<f64>() < p_zero {
                    *v = 0.0;
                }
            }
        }
        inputs.push(x);
        tags.push(kind);
    }
    Ok(Batch {
        batch_index,
        inputs,
        regime_tags: tags,
    })
}

/// Inverse-CDF draw over the regime mix. Rounding that leaves `u` past the
/// cumulative total falls back to the last regime with positive mass.
fn draw_regime(mix: &[f64; 3], u: f64) -> RegimeKind {
    let mut acc = 0.0;
    for (kind, &p) in RegimeKind::ALL.iter().zip(mix) {
        acc += p;
        if p > 0.0 && u < acc {
            return *kind;
        }
    }
    RegimeKind::ALL
        .into_iter()
        .rev()
        .find(|k| mix[k.index()] > 0.0)
        .unwrap_or(RegimeKind::InDistribution)
}

/// Noiseless oracle label.
pub fn oracle_label(teacher: &Teacher, x: &[f64]) -> Result<Vec<f64>> {
    teacher.label(x)
}

/// Write batches as CSV: `batch_index, x0 .. x{d-1}, regime`.
pub fn write_stream_csv(path: &Path, batches: &[Batch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d_in = batches
        .iter()
        .find_map(|b| b.inputs.first().map(Vec::len))
        .unwrap_or(0);
    let mut header = vec!["batch_index".to_string()];
    header.extend((0..d_in).map(|i| format!("x{i}")));
    header.push("regime".into());
    w.write_record(&header)?;
    for b in batches {
        for (x, tag) in b.inputs.iter().zip(&b.regime_tags) {
            let mut row = vec![b.batch_index.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(tag.name().into());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
