//! Small fully connected regression network with a homoscedastic Gaussian
//! output head.
//!
//! Parameters live in one flat [`WeightVector`]. Layer `l` occupies a
//! contiguous block: the `fan_out x fan_in` weight matrix in row-major order,
//! followed by the `fan_out` biases. Hidden layers apply the configured
//! activation; the output layer is linear and its value is the mean of the
//! predictive Gaussian, whose covariance is `sigma^2 I`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected tanh or relu)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    layer_widths: Vec<usize>,
    activation: Activation,
    output_noise_sigma: f64,
}

impl Architecture {
    pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        output_noise_sigma: f64,
    ) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least input and output widths, got {layer_widths:?}"
            )));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "layer widths must be positive, got {layer_widths:?}"
            )));
        }
        if !(output_noise_sigma.is_finite() && output_noise_sigma > 0.0) {
            return Err(Error::InvalidArchitecture(format!(
                "output noise sigma must be positive, got {output_noise_sigma}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
            output_noise_sigma,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_noise_sigma(&self) -> f64 {
        self.output_noise_sigma
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Total parameter count `N`.
    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// `(offset, fan_in, fan_out)` for each layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_widths.windows(2).scan(0usize, |offset, w| {
            let start = *offset;
            *offset += (w[0] + 1) * w[1];
            Some((start, w[0], w[1]))
        })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for both
    /// weights and biases.
    pub fn init_weights(&self, seed: u64) -> WeightVector {
        let mut rng = rng::seeded(seed);
        let mut values = Vec::with_capacity(self.num_params());
        for (_, fan_in, fan_out) in self.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in + 1) * fan_out {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        WeightVector(values)
    }

    fn check(&self, w: &WeightVector, x: &[f64]) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "weight vector",
                expected: self.num_params(),
                got: w.len(),
            });
        }
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward_cache(&self, w: &[f64], x: &[f64]) -> Cache {
        let n_layers = self.layer_widths.len() - 1;
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        post.push(x.to_vec());
        for (l, (offset, fan_in, fan_out)) in self.layers().enumerate() {
            let input = &post[l];
            let bias = offset + fan_in * fan_out;
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[offset + o * fan_in..offset + (o + 1) * fan_in];
                    w[bias + o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                post.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        Cache { pre, post }
    }

    /// Accumulate `out_grad^T d(output)/dw` into `grad`.
    fn backward(&self, w: &[f64], cache: &Cache, out_grad: &[f64], grad: &mut [f64]) {
        let layers: Vec<_> = self.layers().collect();
        let mut delta = out_grad.to_vec();
        for (l, &(offset, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input = &cache.post[l];
            let bias = offset + fan_in * fan_out;
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[offset + o * fan_in..offset + (o + 1) * fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[bias + o] += d;
            }
            if l == 0 {
                break;
            }
            let z_prev = &cache.pre[l - 1];
            let mut next = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[offset + o * fan_in..offset + (o + 1) * fan_in];
                for (n, &wt) in next.iter_mut().zip(row) {
                    *n += wt * d;
                }
            }
            for (i, n) in next.iter_mut().enumerate() {
                *n *= self.activation.derivative(z_prev[i], input[i]);
            }
            delta = next;
        }
    }

    pub fn forward(&self, w: &WeightVector, x: &[f64]) -> Result<GaussianPrediction> {
        self.check(w, x)?;
        let mut cache = self.forward_cache(&w.0, x);
        let mean = cache.pre.pop().unwrap();
        Ok(GaussianPrediction::homoscedastic(
            DVector::from_vec(mean),
            self.output_noise_sigma,
        ))
    }

    /// Exact `d_out x N` Jacobian of the network output with respect to the
    /// weights, one reverse pass per output row.
    pub fn weight_jacobian(&self, w: &WeightVector, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(w, x)?;
        let cache = self.forward_cache(&w.0, x);
        let d_out = self.output_dim();
        let n = self.num_params();
        let mut jac = DMatrix::zeros(d_out, n);
        let mut row = vec![0.0; n];
        let mut seed = vec![0.0; d_out];
        for r in 0..d_out {
            row.iter_mut().for_each(|v| *v = 0.0);
            seed[r] = 1.0;
            self.backward(&w.0, &cache, &seed, &mut row);
            seed[r] = 0.0;
            for (c, &v) in row.iter().enumerate() {
                jac[(r, c)] = v;
            }
        }
        Ok(jac)
    }

    /// Per-example negative log likelihood and its weight gradient,
    /// accumulated into `grad`.
    pub fn loss_and_gradient(
        &self,
        w: &WeightVector,
        example: &LabeledExample,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check(w, &example.input)?;
        self.check_target(&example.target)?;
        let cache = self.forward_cache(&w.0, &example.input);
        let mean = cache.pre.last().unwrap();
        let inv_var = 1.0 / (self.output_noise_sigma * self.output_noise_sigma);
        let resid: Vec<f64> = mean
            .iter()
            .zip(&example.target)
            .map(|(m, y)| (m - y) * inv_var)
            .collect();
        let loss = 0.5
            * mean
                .iter()
                .zip(&example.target)
                .map(|(m, y)| (m - y) * (m - y))
                .sum::<f64>()
            * inv_var;
        self.backward(&w.0, &cache, &resid, grad);
        Ok(loss)
    }

    fn check_target(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "target",
                expected: self.output_dim(),
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Mean [`nll_loss`] over `data`.
    pub fn mean_loss(&self, w: &WeightVector, data: &[LabeledExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyData);
        }
        let mut total = 0.0;
        for ex in data {
            self.check_target(&ex.target)?;
            total += nll_loss(&self.forward(w, &ex.input)?, &ex.target)?;
        }
        Ok(total / data.len() as f64)
    }
}

struct Cache {
    /// Pre-activations per layer; the last entry is the network output.
    pre: Vec<Vec<f64>>,
    /// Inputs to each layer (`post[0]` is `x`).
    post: Vec<Vec<f64>>,
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianPrediction {
    pub fn homoscedastic(mean: DVector<f64>, sigma: f64) -> Self {
        let d = mean.len();
        Self {
            mean,
            covariance: DMatrix::identity(d, d) * (sigma * sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl LabeledExample {
    pub fn new(input: Vec<f64>, target: Vec<f64>) -> Self {
        Self { input, target }
    }
}

/// Negative log likelihood `0.5 (y - mean)^T Sigma^{-1} (y - mean)`.
///
/// The normalizing term `0.5 log det(2 pi Sigma)` is dropped, so a perfect
/// prediction scores exactly zero and the loss is always nonnegative.
pub fn nll_loss(pred: &GaussianPrediction, y: &[f64]) -> Result<f64> {
    let d = pred.mean.len();
    if y.len() != d {
        return Err(Error::DimensionMismatch {
            what: "target",
            expected: d,
            got: y.len(),
        });
    }
    let resid = DVector::from_column_slice(y) - &pred.mean;
    let chol = pred
        .covariance
        .clone()
        .cholesky()
        .ok_or(Error::NonInvertibleCovariance)?;
    let solved = chol.solve(&resid);
    Ok(0.5 * resid.dot(&solved))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: WeightVector,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Set when the mean training loss ended above where it started.
    pub loss_increased: bool,
}

/// Plain mini-batch SGD on the mean [`nll_loss`]. Shuffling is drawn from a
/// generator seeded by `opts.seed`, so the result is a pure function of the
/// arguments.
pub fn train(
    arch: &Architecture,
    w: &WeightVector,
    data: &[LabeledExample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let initial_loss = arch.mean_loss(w, data)?;
    let mut weights = w.clone();
    if opts.epochs == 0 {
        return Ok(TrainReport {
            weights,
            initial_loss,
            final_loss: initial_loss,
            loss_increased: false,
        });
    }
    let batch = opts.minibatch_size.max(1);
    let mut rng = rng::seeded(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; arch.num_params()];
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in chunk {
                loss += arch.loss_and_gradient(&weights, &data[i], &mut grad)?;
            }
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let step = opts.learning_rate / chunk.len() as f64;
            for (wv, g) in weights.0.iter_mut().zip(&grad) {
                *wv -= step * g;
            }
        }
    }
    let final_loss = arch.mean_loss(&weights, data)?;
    if !final_loss.is_finite() || weights.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged {
            epoch: opts.epochs - 1,
        });
    }
    Ok(TrainReport {
        weights,
        initial_loss,
        final_loss,
        loss_increased: final_loss > initial_loss,
    })
}

/// An architecture paired with its current weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub weights: WeightVector,
}

impl Model {
    pub fn new(arch: Architecture, weights: WeightVector) -> Result<Self> {
        if weights.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                what: "weight vector",
                expected: arch.num_params(),
                got: weights.len(),
            });
        }
        Ok(Self { arch, weights })
    }

    pub fn initialized(arch: Architecture, seed: u64) -> Self {
        let weights = arch.init_weights(seed);
        Self { arch, weights }
    }

    pub fn forward(&self, x: &[f64]) -> Result<GaussianPrediction> {
        self.arch.forward(&self.weights, x)
    }

    pub fn weight_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.arch.weight_jacobian(&self.weights, x)
    }

    pub fn mean_loss(&self, data: &[LabeledExample]) -> Result<f64> {
        self.arch.mean_loss(&self.weights, data)
    }

    /// Train in place; returns the loss bookkeeping.
    pub fn train(&mut self, data: &[LabeledExample], opts: &TrainOptions) -> Result<TrainReport> {
        let report = train(&self.arch, &self.weights, data, opts)?;
        self.weights = report.weights.clone();
        Ok(report)
    }

    /// Flat little-endian layout: `L: u64`, the `L` layer widths as u64,
    /// activation code `u64` (0 tanh, 1 relu), `sigma: f64`, `N: u64`, then
    /// the `N` weights as f64.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let widths = self.arch.layer_widths();
        out.write_all(&(widths.len() as u64).to_le_bytes())?;
        for &w in widths {
            out.write_all(&(w as u64).to_le_bytes())?;
        }
        let code: u64 = match self.arch.activation() {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        };
        out.write_all(&code.to_le_bytes())?;
        out.write_all(&self.arch.output_noise_sigma().to_le_bytes())?;
        out.write_all(&(self.weights.len() as u64).to_le_bytes())?;
        for v in self.weights.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::Format {
            what: "model",
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "model",
            reason,
        };
        if !bytes.len().is_multiple_of(8) || bytes.is_empty() {
            return Err(bad(format!("length {} is not a positive multiple of 8", bytes.len())));
        }
        let words: Vec<[u8; 8]> = bytes.chunks_exact(8).map(|c| c.try_into().unwrap()).collect();
        let int = |i: usize| -> Result<usize> {
            words
                .get(i)
                .map(|w| u64::from_le_bytes(*w) as usize)
                .ok_or_else(|| bad("truncated header".into()))
        };
        let layers = int(0)?;
        if layers > words.len() {
            return Err(bad(format!("implausible layer count {layers}")));
        }
        let widths = (1..=layers).map(int).collect::<Result<Vec<_>>>()?;
        let activation = match int(layers + 1)? {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            other => return Err(bad(format!("unknown activation code {other}"))),
        };
        let sigma = f64::from_le_bytes(
            *words
                .get(layers + 2)
                .ok_or_else(|| bad("truncated header".into()))?,
        );
        let n = int(layers + 3)?;
        let start = layers + 4;
        if words.len() != start + n {
            return Err(bad(format!(
                "expected {} weights, found {}",
                n,
                words.len().saturating_sub(start)
            )));
        }
        let arch = Architecture::new(widths, activation, sigma)?;
        let weights = WeightVector::new(words[start..].iter().map(|w| f64::from_le_bytes(*w)).collect())?;
        Self::new(arch, weights)
    }
}
