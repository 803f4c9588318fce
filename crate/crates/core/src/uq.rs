//! Epistemic uncertainty from a low-rank Laplace posterior over weights.
//!
//! Offline, the Gauss-Newton curvature `H = sum_i L_i^T L_i` is accumulated
//! over the training inputs, where `L_i = Sigma_i^{-1/2} J_i` is the
//! Fisher-scaled output Jacobian. Its top-`r` eigenpairs `(U, lambda)` and the
//! prior scale `eps` define the posterior covariance
//!
//! ```text
//! Sigma* = (U diag(lambda) U^T + eps^-2 I)^-1
//!        = eps^2 I - U diag(s) U^T,   s_j = eps^4 lambda_j / (1 + eps^2 lambda_j)
//! ```
//!
//! Online, a test input is scored by `trace(L_t Sigma* L_t^T)`, which the
//! factored form evaluates in `O(d_out N r)`.
//!
//! This score is the second-order expansion of `2 E[KL]`: for a Gaussian head,
//! `E_{dw ~ N(0, Sigma*)}[KL(p_{w*} || p_{w* + dw})] ~= uncertainty / 2`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nnet::{Architecture, LabeledExample, WeightVector};
use crate::rng;

/// Oversampling columns for the randomized range finder.
pub const SKETCH_OVERSAMPLING: usize = 10;
/// Power iterations for the randomized range finder.
pub const SKETCH_POWER_ITERATIONS: usize = 1;
pub const DEFAULT_PRIOR_SCALE: f64 = 1.0;
pub const DEFAULT_MAX_RANK: usize = 40;

/// Fisher-scaled Jacobian `L = Sigma^{-1/2} J` of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefUpdate {
    matrix: DMatrix<f64>,
    frobenius_norm: f64,
}

impl BeliefUpdate {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let frobenius_norm = matrix.norm();
        Self {
            matrix,
            frobenius_norm,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm
    }

    pub fn num_params(&self) -> usize {
        self.matrix.ncols()
    }

    /// Frobenius inner product `<L_a, L_b> = trace(L_a L_b^T)`.
    pub fn inner(&self, other: &BeliefUpdate) -> f64 {
        self.matrix.dot(&other.matrix)
    }
}

/// Symmetric inverse square root of an SPD matrix.
fn inverse_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    if cov.ncols() != d {
        return Err(Error::NonInvertibleCovariance);
    }
    let scale = cov.amax();
    let asym = (cov - cov.transpose()).amax();
    if !(scale.is_finite() && scale > 0.0) || asym > 1e-12 * scale.max(1.0) {
        return Err(Error::NonInvertibleCovariance);
    }
    // Scalar multiple of the identity: keep the scaling exact.
    let c = cov[(0, 0)];
    if (0..d).all(|i| (0..d).all(|j| cov[(i, j)] == if i == j { c } else { 0.0 })) {
        if c <= 0.0 {
            return Err(Error::NonInvertibleCovariance);
        }
        return Ok(DMatrix::identity(d, d) / c.sqrt());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    if eig.eigenvalues.iter().any(|&v| v <= 1e-14 * max) {
        return Err(Error::NonInvertibleCovariance);
    }
    let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose())
}

/// Belief update of input `x` under prediction covariance `cov`.
pub fn belief_update(
    arch: &Architecture,
    w: &WeightVector,
    x: &[f64],
    prediction_covariance: &DMatrix<f64>,
) -> Result<BeliefUpdate> {
    let jac = arch.weight_jacobian(w, x)?;
    if prediction_covariance.nrows() != jac.nrows() {
        return Err(Error::DimensionMismatch {
            what: "prediction covariance",
            expected: jac.nrows(),
            got: prediction_covariance.nrows(),
        });
    }
    let scale = inverse_sqrt(prediction_covariance)?;
    Ok(BeliefUpdate::from_matrix(scale * jac))
}

/// Belief update using the model's own (homoscedastic) output covariance.
pub fn model_belief_update(
    arch: &Architecture,
    w: &WeightVector,
    x: &[f64],
) -> Result<BeliefUpdate> {
    let jac = arch.weight_jacobian(w, x)?;
    Ok(BeliefUpdate::from_matrix(jac / arch.output_noise_sigma()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitMode {
    /// Dense eigendecomposition of the accumulated `N x N` curvature.
    #[default]
    Exact,
    /// Seeded randomized range finder over the stacked belief-update rows.
    Sketched,
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::Exact => "exact",
            FitMode::Sketched => "sketched",
        })
    }
}

impl FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "exact" => Ok(FitMode::Exact),
            "sketched" => Ok(FitMode::Sketched),
            other => Err(Error::Config(format!(
                "unknown fit mode {other:?} (expected exact or sketched)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorOptions {
    pub rank: usize,
    pub prior_scale: f64,
    pub mode: FitMode,
    pub seed: u64,
}

/// Laplace posterior `Sigma*` in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPosterior {
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    prior_scale: f64,
    dataset_size: u64,
}

impl LowRankPosterior {
    pub fn new(
        basis: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        prior_scale: f64,
        dataset_size: u64,
    ) -> Result<Self> {
        if !(prior_scale.is_finite() && prior_scale > 0.0) {
            return Err(Error::InvalidPriorScale(prior_scale));
        }
        if basis.ncols() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                what: "posterior eigenvalues",
                expected: basis.ncols(),
                got: eigenvalues.len(),
            });
        }
        if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0)
            || eigenvalues.windows(2).any(|p| p[0] < p[1])
        {
            return Err(Error::Format {
                what: "posterior",
                reason: "eigenvalues must be finite, nonnegative and descending".into(),
            });
        }
        Ok(Self {
            basis,
            eigenvalues,
            prior_scale,
            dataset_size,
        })
    }

    /// Prior-only posterior `Sigma* = eps^2 I`.
    pub fn prior_only(num_params: usize, prior_scale: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(num_params, 0), Vec::new(), prior_scale, 0)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn prior_scale(&self) -> f64 {
        self.prior_scale
    }

    pub fn dataset_size(&self) -> u64 {
        self.dataset_size
    }

    pub fn num_params(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Shrinkage weights `s_j = eps^4 lambda_j / (1 + eps^2 lambda_j)`.
    pub fn shrinkage(&self) -> Vec<f64> {
        let e2 = self.prior_scale * self.prior_scale;
        self.eigenvalues
            .iter()
            .map(|&l| e2 * (e2 * l) / (1.0 + e2 * l))
            .collect()
    }

    /// Dense `Sigma*`; only sensible for small `N`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.num_params();
        let e2 = self.prior_scale * self.prior_scale;
        let s = nalgebra::DVector::from_vec(self.shrinkage());
        DMatrix::identity(n, n) * e2 - &self.basis * DMatrix::from_diagonal(&s) * self.basis.transpose()
    }

    /// `trace(L Sigma* L^T)`, evaluated in factored form.
    pub fn uncertainty(&self, update: &BeliefUpdate) -> Result<f64> {
        if update.num_params() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "belief update columns",
                expected: self.num_params(),
                got: update.num_params(),
            });
        }
        let e2 = self.prior_scale * self.prior_scale;
        let prior = e2 * update.frobenius_norm * update.frobenius_norm;
        if self.rank() == 0 {
            return Ok(prior);
        }
        let proj = update.matrix() * &self.basis;
        let captured: f64 = self
            .shrinkage()
            .iter()
            .enumerate()
            .map(|(j, s)| s * proj.column(j).norm_squared())
            .sum();
        Ok((prior - captured).max(0.0))
    }

    /// Write the flat little-endian layout:
    /// `N: u64, r: u64, eps: f64, M: u64`, then `U` column-major (`N*r` f64),
    /// then `lambda` (`r` f64).
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&(self.num_params() as u64).to_le_bytes())?;
        out.write_all(&(self.rank() as u64).to_le_bytes())?;
        out.write_all(&self.prior_scale.to_le_bytes())?;
        out.write_all(&self.dataset_size.to_le_bytes())?;
        for v in self.basis.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.eigenvalues {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + 8 * self.rank() * (self.num_params() + 1));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::Format {
            what: "posterior",
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "posterior",
            reason,
        };
        if bytes.len() < 32 {
            return Err(bad(format!("header needs 32 bytes, got {}", bytes.len())));
        }
        let word = |i: usize| -> [u8; 8] { bytes[8 * i..8 * i + 8].try_into().unwrap() };
        let n = u64::from_le_bytes(word(0)) as usize;
        let r = u64::from_le_bytes(word(1)) as usize;
        let eps = f64::from_le_bytes(word(2));
        let m = u64::from_le_bytes(word(3));
        let expected = n
            .checked_mul(r)
            .and_then(|nr| nr.checked_add(r))
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(32))
            .ok_or_else(|| bad("header dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for N={n}, r={r}, got {}",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = (4..expected / 8).map(|i| f64::from_le_bytes(word(i))).collect();
        let basis = DMatrix::from_column_slice(n, r, &floats[..n * r]);
        Self::new(basis, floats[n * r..].to_vec(), eps, m)
    }
}

/// Stack the belief updates of all inputs into a `(M d_out) x N` matrix.
fn stacked_updates(
    arch: &Architecture,
    w: &WeightVector,
    data: &[LabeledExample],
) -> Result<DMatrix<f64>> {
    let d_out = arch.output_dim();
    let n = arch.num_params();
    let mut a = DMatrix::zeros(data.len() * d_out, n);
    for (i, ex) in data.iter().enumerate() {
        let l = model_belief_update(arch, w, &ex.input)?;
        a.rows_mut(i * d_out, d_out).copy_from(l.matrix());
    }
    Ok(a)
}

/// Top-`r` eigenpairs of a symmetric matrix, descending, clamped at zero.
fn top_eigenpairs(sym: DMatrix<f64>, r: usize) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let n = eig.eigenvectors.nrows();
    let mut basis = DMatrix::zeros(n, r);
    let mut values = Vec::with_capacity(r);
    for (j, &idx) in order.iter().take(r).enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(idx));
        values.push(eig.eigenvalues[idx].max(0.0));
    }
    (basis, values)
}

/// Fit the low-rank Laplace posterior around `w_star` from the training inputs.
pub fn fit_posterior(
    arch: &Architecture,
    w_star: &WeightVector,
    training_data: &[LabeledExample],
    opts: &PosteriorOptions,
) -> Result<LowRankPosterior> {
    let n = arch.num_params();
    let max_rank = n.min(training_data.len() * arch.output_dim());
    if opts.rank > max_rank {
        return Err(Error::InvalidRank {
            rank: opts.rank,
            max: max_rank,
        });
    }
    if !(opts.prior_scale.is_finite() && opts.prior_scale > 0.0) {
        return Err(Error::InvalidPriorScale(opts.prior_scale));
    }
    let m = training_data.len() as u64;
    if opts.rank == 0 {
        return LowRankPosterior::new(DMatrix::zeros(n, 0), Vec::new(), opts.prior_scale, m);
    }
    let stacked = stacked_updates(arch, w_star, training_data)?;
    let (basis, eigenvalues) = match opts.mode {
        FitMode::Exact => top_eigenpairs(stacked.tr_mul(&stacked), opts.rank),
        FitMode::Sketched => sketch_eigenpairs(&stacked, opts.rank, opts.seed),
    };
    LowRankPosterior::new(basis, eigenvalues, opts.prior_scale, m)
}

/// Randomized range finder for the top eigenpairs of `A^T A`, touching `A`
/// only through products. Rayleigh-Ritz on the captured subspace means each
/// returned eigenvalue is at most its exact counterpart.
fn sketch_eigenpairs(a: &DMatrix<f64>, r: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.ncols();
    let width = (r + SKETCH_OVERSAMPLING).min(n);
    let mut rng = rng::seeded(seed);
    let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
    let gram_apply = |m: &DMatrix<f64>| a.tr_mul(&(a * m));
    let mut q = gram_apply(&omega).qr().q();
    for _ in 0..SKETCH_POWER_ITERATIONS {
        q = gram_apply(&q).qr().q();
    }
    let aq = a * &q;
    let small = aq.tr_mul(&aq);
    let (v, values) = top_eigenpairs(small, r);
    (q * v, values)
}
