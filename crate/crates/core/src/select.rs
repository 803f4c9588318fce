//! Flagging strategies: which inputs of a batch get sent to the labeler.
//!
//! The diverse selector approximates the full-batch belief update
//! `sum_i L_i` by a sparse nonnegative combination `sum_i c_i L_i`, solving
//!
//! ```text
//! minimize (1 - c)^T K (1 - c)
//! subject to c >= 0,  sum_i c_i sigma_i = sum_i sigma_i
//! ```
//!
//! with `K_ij = <L_i, L_j>` and `sigma_i = ||L_i||_F`, by `k` Frank-Wolfe
//! iterations. The feasible set is the scaled simplex with vertices
//! `(sigma_total / sigma_f) e_f`; minimizing the linearized objective
//! `-2 K (1 - c)` over those vertices picks
//! `f = argmax_i [K (1 - c)]_i / sigma_i`. Each iteration adds at most one
//! index to the support, so at most `k` inputs are flagged.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng;
use crate::uq::BeliefUpdate;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub flags: Vec<bool>,
    /// Frank-Wolfe coefficients for the diverse strategy; one-hot indicators
    /// for fixed-budget strategies; zeros for the naive ones.
    pub weights: Vec<f64>,
    /// Objective after each Frank-Wolfe iteration (diverse only).
    pub objective_trace: Vec<f64>,
}

impl SelectionResult {
    fn empty(m: usize) -> Self {
        Self {
            flags: vec![false; m],
            weights: vec![0.0; m],
            objective_trace: Vec::new(),
        }
    }

    fn from_indices(m: usize, indices: &[usize]) -> Self {
        let mut out = Self::empty(m);
        for &i in indices {
            out.flags[i] = true;
            out.weights[i] = 1.0;
        }
        out
    }

    pub fn num_flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn flagged_indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    NaiveFalse,
    NaiveTrue,
    Random,
    Scod,
    Diverse,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::NaiveFalse,
        Strategy::NaiveTrue,
        Strategy::Random,
        Strategy::Scod,
        Strategy::Diverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NaiveFalse => "naive_false",
            Strategy::NaiveTrue => "naive_true",
            Strategy::Random => "random",
            Strategy::Scod => "scod",
            Strategy::Diverse => "diverse",
        }
    }

    /// Whether the strategy spends a per-batch budget `k`.
    pub fn is_budgeted(self) -> bool {
        matches!(self, Strategy::Random | Strategy::Scod | Strategy::Diverse)
    }

    /// Whether flagging consults the Laplace posterior.
    pub fn uses_posterior(self) -> bool {
        matches!(self, Strategy::Scod)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .or(match s {
                "scod_k_highest" => Some(Strategy::Scod),
                "random_k" => Some(Strategy::Random),
                "ds-scod" | "ds_scod" => Some(Strategy::Diverse),
                _ => None,
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected naive_false, naive_true, random, scod or diverse)"
                ))
            })
    }
}

pub fn flag_naive(m: usize, value: bool) -> SelectionResult {
    SelectionResult {
        flags: vec![value; m],
        weights: vec![0.0; m],
        objective_trace: Vec::new(),
    }
}

/// Exactly `k` indices drawn uniformly without replacement.
pub fn flag_random(m: usize, k: usize, seed: u64) -> Result<SelectionResult> {
    if k > m {
        return Err(Error::InvalidBudget { k, m });
    }
    let mut rng = rng::seeded(seed);
    let picked = rand::seq::index::sample(&mut rng, m, k).into_vec();
    Ok(SelectionResult::from_indices(m, &picked))
}

/// The `k` highest scores; equal scores resolve to the lower index.
pub fn flag_scod_k(uncertainties: &[f64], k: usize) -> Result<SelectionResult> {
    let m = uncertainties.len();
    if k > m {
        return Err(Error::InvalidBudget { k, m });
    }
    if uncertainties.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite("uncertainty scores"));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        uncertainties[b]
            .total_cmp(&uncertainties[a])
            .then(a.cmp(&b))
    });
    Ok(SelectionResult::from_indices(m, &order[..k]))
}

/// Gram matrix of belief updates under the Frobenius inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    norms: Vec<f64>,
}

impl KernelMatrix {
    /// Wrap a precomputed symmetric PSD matrix.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        let m = entries.nrows();
        if entries.ncols() != m {
            return Err(Error::DimensionMismatch {
                what: "kernel columns",
                expected: m,
                got: entries.ncols(),
            });
        }
        let norms = (0..m).map(|i| entries[(i, i)].max(0.0).sqrt()).collect();
        Ok(Self { entries, norms })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// `(1 - c)^T K (1 - c)`.
    pub fn residual(&self, c: &[f64]) -> f64 {
        let r = DVector::from_iterator(c.len(), c.iter().map(|v| 1.0 - v));
        r.dot(&(&self.entries * &r))
    }
}

pub fn build_kernel(updates: &[BeliefUpdate]) -> Result<KernelMatrix> {
    let m = updates.len();
    if let Some(first) = updates.first() {
        let shape = first.matrix().shape();
        if let Some(bad) = updates.iter().find(|u| u.matrix().shape() != shape) {
            return Err(Error::DimensionMismatch {
                what: "belief update columns",
                expected: shape.1,
                got: bad.matrix().ncols(),
            });
        }
    }
    let mut entries = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = updates[i].inner(&updates[j]);
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    KernelMatrix::from_entries(entries)
}

/// Relative threshold below which a belief update counts as zero.
const ZERO_NORM_RTOL: f64 = 1e-12;

/// Frank-Wolfe diverse subselection with `k` iterations.
///
/// The first iteration moves from the origin straight onto the vertex picked
/// by the linear minimization step (step size 1), which puts the iterate on
/// the constraint surface; every later iteration uses the exact line search
/// `gamma = clamp(d^T K r / d^T K d, 0, 1)` with `r = 1 - c`, `d = v - c`.
/// Inputs with zero-norm updates are never selectable, and `k = 0` or an
/// all-zero kernel yields an empty selection.
pub fn flag_diverse(kernel: &KernelMatrix, k: usize) -> SelectionResult {
    let m = kernel.len();
    let mut out = SelectionResult::empty(m);
    let norms = kernel.norms();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    if k == 0 || max_norm <= 0.0 {
        return out;
    }
    let active: Vec<usize> = (0..m)
        .filter(|&i| norms[i] > ZERO_NORM_RTOL * max_norm)
        .collect();
    let total: f64 = active.iter().map(|&i| norms[i]).sum();
    let kmat = kernel.entries();
    let mut c = DVector::<f64>::zeros(m);

    for iter in 0..k {
        let r = DVector::from_element(m, 1.0) - &c;
        let kr = kmat * &r;
        let mut best = active[0];
        let mut best_score = kr[best] / norms[best];
        for &i in &active[1..] {
            let score = kr[i] / norms[i];
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        let mut vertex = DVector::zeros(m);
        vertex[best] = total / norms[best];
        let gamma = if iter == 0 {
            1.0
        } else {
            let d = &vertex - &c;
            let kd = kmat * &d;
            let curvature = d.dot(&kd);
            if curvature > 0.0 {
                (kd.dot(&r) / curvature).clamp(0.0, 1.0)
            } else {
                0.0
            }
        };
        c = &c * (1.0 - gamma) + vertex * gamma;
        out.objective_trace.push(kernel.residual(c.as_slice()));
    }

    for i in 0..m {
        out.weights[i] = c[i];
        out.flags[i] = c[i] > 0.0;
    }
    out
}

/// Exhaustive subset search, used as a correctness oracle for
/// [`flag_diverse`] on small batches.
pub mod oracle {
    use super::*;

    /// Largest batch the enumeration accepts.
    pub const MAX_ENUMERATION: usize = 20;
    const CD_TOL: f64 = 1e-10;
    const CD_MAX_SWEEPS: usize = 100_000;

    #[derive(Debug, Clone, PartialEq)]
    pub struct ExactSubset {
        pub indices: Vec<usize>,
        /// Optimal nonnegative weights, full length `m`.
        pub weights: Vec<f64>,
        pub objective: f64,
    }

    /// Best nonnegative reweighting restricted to `support`, by projected
    /// coordinate descent on `(1 - c)^T K (1 - c)`.
    pub fn support_objective(kernel: &KernelMatrix, support: &[usize]) -> (Vec<f64>, f64) {
        let m = kernel.len();
        let k = kernel.entries();
        let k1: Vec<f64> = (0..m).map(|i| k.row(i).sum()).collect();
        let mut c = vec![0.0; m];
        for _ in 0..CD_MAX_SWEEPS {
            let mut max_change: f64 = 0.0;
            for &i in support {
                let kii = k[(i, i)];
                if kii <= 0.0 {
                    continue;
                }
                let cross: f64 = support
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| k[(i, j)] * c[j])
                    .sum();
                let next = ((k1[i] - cross) / kii).max(0.0);
                max_change = max_change.max((next - c[i]).abs());
                c[i] = next;
            }
            if max_change <= CD_TOL {
                break;
            }
        }
        let obj = kernel.residual(&c);
        (c, obj)
    }

    /// Enumerate every subset of size at most `k` (smaller subsets first,
    /// lexicographic within a size) and keep the strictly best one.
    pub fn solve_exact_subset(kernel: &KernelMatrix, k: usize) -> Result<ExactSubset> {
        let m = kernel.len();
        if m > MAX_ENUMERATION {
            return Err(Error::EnumerationBound {
                m,
                max: MAX_ENUMERATION,
            });
        }
        let k = k.min(m);
        let scale = kernel.entries().amax().max(f64::MIN_POSITIVE) * (m * m) as f64;
        let mut best = ExactSubset {
            indices: Vec::new(),
            weights: vec![0.0; m],
            objective: kernel.residual(&vec![0.0; m]),
        };
        for size in 1..=k {
            let mut subset: Vec<usize> = (0..size).collect();
            loop {
                let (weights, objective) = support_objective(kernel, &subset);
                if objective < best.objective - 1e-12 * scale {
                    best = ExactSubset {
                        indices: subset.clone(),
                        weights,
                        objective,
                    };
                }
                if !next_combination(&mut subset, m) {
                    break;
                }
            }
        }
        Ok(best)
    }

    fn next_combination(subset: &mut [usize], m: usize) -> bool {
        let size = subset.len();
        let mut i = size;
        while i > 0 {
            i -= 1;
            if subset[i] < m - size + i {
                subset[i] += 1;
                for j in i + 1..size {
                    subset[j] = subset[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }

}
