//! Everything a lifecycle run needs for one master seed: the teacher, the
//! in-distribution training set, the pretrained student and its posterior,
//! and the stream configuration.
//!
//! Component seeds are derived from the master seed with fixed tags so that
//! any artifact can be regenerated independently.

use crate::datagen::{self, StreamConfig, Teacher};
use crate::error::Result;
use crate::nnet::{Activation, Architecture, LabeledExample, Model, TrainOptions};
use crate::rng::derive_seed;
use crate::uq::{self, FitMode, LowRankPosterior, PosteriorOptions};

const TAG_TEACHER: u64 = 1;
const TAG_TRAINING_SET: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_PRETRAIN: u64 = 4;
const TAG_POSTERIOR: u64 = 5;
const TAG_STREAM: u64 = 6;
const TAG_LIFECYCLE: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
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
    pub rank: usize,
    pub prior_scale: f64,
    pub fit_mode: FitMode,
    /// The stream's `seed` field is overwritten by the derived stream seed.
    pub stream: StreamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d_in: datagen::DEFAULT_D_IN,
            d_out: datagen::DEFAULT_D_OUT,
            hidden_widths: vec![16],
            activation: Activation::Relu,
            output_noise_sigma: Architecture::DEFAULT_NOISE_SIGMA,
            teacher_gain: datagen::TEACHER_OUTPUT_GAIN,
            train_size: datagen::DEFAULT_TRAINING_SIZE,
            train_noise_sigma: 0.1,
            pretrain_epochs: 300,
            pretrain_lr: 1e-3,
            minibatch_size: 20,
            rank: uq::DEFAULT_MAX_RANK,
            prior_scale: uq::DEFAULT_PRIOR_SCALE,
            fit_mode: FitMode::Exact,
            stream: StreamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn architecture(&self) -> Result<Architecture> {
        let mut widths = vec![self.d_in];
        widths.extend(&self.hidden_widths);
        widths.push(self.d_out);
        Architecture::new(widths, self.activation, self.output_noise_sigma)
    }

    /// Requested rank clipped to what the training set can support.
    pub fn effective_rank(&self, arch: &Architecture, num_examples: usize) -> usize {
        self.rank
            .min(arch.num_params())
            .min(num_examples * arch.output_dim())
    }

    pub fn posterior_options(&self, arch: &Architecture, num_examples: usize, seed: u64) -> PosteriorOptions {
        PosteriorOptions {
            rank: self.effective_rank(arch, num_examples),
            prior_scale: self.prior_scale,
            mode: self.fit_mode,
            seed,
        }
    }

    pub fn stream_for(&self, master_seed: u64) -> StreamConfig {
        StreamConfig {
            seed: derive_seed(master_seed, TAG_STREAM),
            ..self.stream.clone()
        }
    }
}

/// Seed for lifecycle-level randomness (random flagging, retraining shuffles).
pub fn lifecycle_seed(master_seed: u64) -> u64 {
    derive_seed(master_seed, TAG_LIFECYCLE)
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub teacher: Teacher,
    pub training_set: Vec<LabeledExample>,
    pub model: Model,
    pub posterior: LowRankPosterior,
    pub stream: StreamConfig,
}

impl Experiment {
    /// Regenerate the seeded data without training anything.
    fn data(config: &ExperimentConfig, seed: u64) -> Result<(Teacher, Vec<LabeledExample>)> {
        let teacher = datagen::make_teacher_with_gain(
            config.d_in,
            config.d_out,
            config.teacher_gain,
            derive_seed(seed, TAG_TEACHER),
        )?;
        let training = datagen::training_set(
            &teacher,
            config.train_size,
            config.train_noise_sigma,
            derive_seed(seed, TAG_TRAINING_SET),
        )?;
        Ok((teacher, training))
    }

    /// Pretrain the student on the training set and fit its posterior.
    pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.stream.validate()?;
        let (teacher, training_set) = Self::data(config, seed)?;
        let arch = config.architecture()?;
        let mut model = Model::initialized(arch, derive_seed(seed, TAG_INIT));
        model.train(
            &training_set,
            &TrainOptions {
                epochs: config.pretrain_epochs,
                learning_rate: config.pretrain_lr,
                minibatch_size: config.minibatch_size,
                seed: derive_seed(seed, TAG_PRETRAIN),
            },
        )?;
        let opts = config.posterior_options(&model.arch, training_set.len(), derive_seed(seed, TAG_POSTERIOR));
        let posterior = uq::fit_posterior(&model.arch, &model.weights, &training_set, &opts)?;
        Ok(Self {
            master_seed: seed,
            config: config.clone(),
            teacher,
            training_set,
            model,
            posterior,
            stream: config.stream_for(seed),
        })
    }

    /// Rebuild from a saved model and posterior.
    pub fn from_artifacts(
        config: &ExperimentConfig,
        seed: u64,
        model: Model,
        posterior: LowRankPosterior,
    ) -> Result<Self> {
        config.stream.validate()?;
        let (teacher, training_set) = Self::data(config, seed)?;
        Ok(Self {
            master_seed: seed,
            config: config.clone(),
            teacher,
            training_set,
            model,
            posterior,
            stream: config.stream_for(seed),
        })
    }
}
