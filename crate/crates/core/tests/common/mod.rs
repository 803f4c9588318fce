#![allow(dead_code)]

use dlm_core::nnet::{Activation, Architecture, LabeledExample, WeightVector};
use dlm_core::rng::{self, Rng};
use nalgebra::DMatrix;

pub fn normal_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng::standard_normal(rng)).collect()
}

pub fn arch(widths: &[usize], activation: Activation) -> Architecture {
    Architecture::new(widths.to_vec(), activation, 0.1).unwrap()
}

/// A small random network: 1 or 2 hidden layers, widths 1..=6, tanh or relu.
pub fn random_net(seed: u64) -> (Architecture, WeightVector) {
    use rand::Rng as _;
    let mut r = rng::seeded(seed);
    let depth = r.random_range(1..=2);
    let mut widths = vec![r.random_range(1..=5)];
    for _ in 0..depth {
        widths.push(r.random_range(1..=6));
    }
    widths.push(r.random_range(1..=3));
    let act = if r.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let a = arch(&widths, act);
    let w = WeightVector::new(normal_vec(&mut r, a.num_params(), 0.7)).unwrap();
    (a, w)
}

pub fn forward_mean(a: &Architecture, w: &WeightVector, x: &[f64]) -> Vec<f64> {
    a.forward(w, x).unwrap().mean.iter().copied().collect()
}

/// Central finite-difference Jacobian of the network output in the weights.
pub fn fd_jacobian(a: &Architecture, w: &WeightVector, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = w.len();
    let d = a.output_dim();
    let mut jac = DMatrix::zeros(d, n);
    for j in 0..n {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus.as_mut_slice()[j] += h;
        minus.as_mut_slice()[j] -= h;
        let fp = forward_mean(a, &plus, x);
        let fm = forward_mean(a, &minus, x);
        for r in 0..d {
            jac[(r, j)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    jac
}

/// Entry-wise relative error with a floor so near-zero entries compare
/// absolutely.
pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn random_examples(rng: &mut Rng, a: &Architecture, m: usize) -> Vec<LabeledExample> {
    (0..m)
        .map(|_| {
            LabeledExample::new(
                normal_vec(rng, a.input_dim(), 1.0),
                normal_vec(rng, a.output_dim(), 1.0),
            )
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0);
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Means of the four consecutive quarters of `losses`.
pub fn quartile_means(losses: &[f64]) -> [f64; 4] {
    let q = losses.len() / 4;
    assert!(q > 0);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    [
        mean(&losses[..q]),
        mean(&losses[q..2 * q]),
        mean(&losses[2 * q..3 * q]),
        mean(&losses[losses.len() - q..]),
    ]
}

/// `sum_i J_i^T J_i / sigma^2`, accumulated densely from the Jacobians.
pub fn dense_curvature(a: &Architecture, w: &WeightVector, data: &[LabeledExample]) -> DMatrix<f64> {
    let n = a.num_params();
    let s2 = a.output_noise_sigma() * a.output_noise_sigma();
    let mut h = DMatrix::zeros(n, n);
    for ex in data {
        let j = a.weight_jacobian(w, &ex.input).unwrap();
        h += j.transpose() * &j / s2;
    }
    h
}

/// `trace(L (H + eps^-2 I)^-1 L^T)` by dense inversion.
pub fn dense_uncertainty(h: &DMatrix<f64>, eps: f64, l: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let prec = h + DMatrix::identity(n, n) / (eps * eps);
    // Cholesky rather than try_inverse: the closed-form small-matrix inverses
    // lose precision on ill-conditioned inputs.
    let solved = nalgebra::Cholesky::new(prec).unwrap().solve(&l.transpose());
    (l * solved).trace()
}

/// Monte-Carlo mean of the output KL divergence between the network at `w`
/// and at `w + dw`, `dw ~ N(0, cov)`, for the homoscedastic head.
pub fn mc_mean_kl(
    a: &Architecture,
    w: &WeightVector,
    x: &[f64],
    cov: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> f64 {
    let n = a.num_params();
    let chol = nalgebra::Cholesky::new(cov.clone()).expect("posterior covariance is SPD");
    let lower = chol.l();
    let base = forward_mean(a, w, x);
    let s2 = a.output_noise_sigma() * a.output_noise_sigma();
    let mut r = rng::seeded(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let z = nalgebra::DVector::from_vec(normal_vec(&mut r, n, 1.0));
        let dw = &lower * z;
        let shifted: Vec<f64> = w.as_slice().iter().zip(dw.iter()).map(|(a, b)| a + b).collect();
        let out = forward_mean(a, &WeightVector::new(shifted).unwrap(), x);
        let sq: f64 = out.iter().zip(&base).map(|(p, q)| (p - q) * (p - q)).sum();
        total += 0.5 * sq / s2;
    }
    total / draws as f64
}

/// A seeded FW test instance: `m` random belief updates of shape `2 x p`,
/// some of them clustered, so that diversity matters.
pub fn random_updates(seed: u64, m: usize) -> Vec<dlm_core::uq::BeliefUpdate> {
    use rand::Rng as _;
    let mut r = rng::seeded(seed);
    let p = r.random_range(2..=6);
    let centers: Vec<Vec<f64>> = (0..r.random_range(1..=3)).map(|_| normal_vec(&mut r, 2 * p, 1.0)).collect();
    (0..m)
        .map(|_| {
            let c = &centers[r.random_range(0..centers.len())];
            let scale = r.random_range(0.2..3.0);
            let noise = normal_vec(&mut r, 2 * p, 0.3);
            let v: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| scale * (a + b)).collect();
            dlm_core::uq::BeliefUpdate::from_matrix(DMatrix::from_vec(2, p, v))
        })
        .collect()
}
