//! Choosing which deployment inputs to label when the input stream drifts
//! away from the training data.
//!
//! - [`nnet`]: small regression network with exact weight Jacobians and SGD.
//! - [`uq`]: low-rank Laplace posterior and trace-form epistemic uncertainty.
//! - [`select`]: flagging strategies, including Frank-Wolfe diverse subselection.
//! - [`datagen`]: seeded teacher and evolving input stream.
//! - [`bench`]: the episodic flag/label/retrain benchmark and its metrics.
//! - [`config`] and [`cli`]: key-value run configuration and the `dlm` commands.

pub mod bench;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod nnet;
pub mod rng;
pub mod select;
pub mod uq;

pub use error::{Error, Result};
