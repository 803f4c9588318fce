mod common;

use common::*;
use dlm_core::datagen;
use dlm_core::nnet::{
    nll_loss, train, Activation, GaussianPrediction, LabeledExample, Model, TrainOptions,
    WeightVector,
};
use dlm_core::rng;
use dlm_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn zero_weights_give_zero_mean_and_noise_covariance() {
    let a = arch(&[3, 4, 2], Activation::Tanh);
    let w = WeightVector::zeros(a.num_params());
    let pred = a.forward(&w, &[0.3, -1.0, 2.0]).unwrap();
    assert_eq!(pred.mean, DVector::zeros(2));
    assert_eq!(pred.covariance, DMatrix::identity(2, 2) * (0.1 * 0.1));
}

#[test]
fn linear_net_by_hand() {
    let a = arch(&[1, 1], Activation::Relu);
    let w = WeightVector::new(vec![2.0, 0.0]).unwrap();
    assert_eq!(forward_mean(&a, &w, &[3.0]), vec![6.0]);

    let a = arch(&[2, 1], Activation::Tanh);
    let w = WeightVector::new(vec![0.4, -1.3, 0.2]).unwrap();
    let jac = a.weight_jacobian(&w, &[1.5, -2.0]).unwrap();
    assert_eq!(jac, DMatrix::from_row_slice(1, 3, &[1.5, -2.0, 1.0]));
}

#[test]
fn zero_input_zeroes_first_layer_weight_columns() {
    let a = arch(&[3, 4, 2], Activation::Tanh);
    let mut r = rng::seeded(3);
    let mut values = normal_vec(&mut r, a.num_params(), 1.0);
    // Zero every bias: first layer biases sit after its 3*4 weights, the
    // second after offset 16 + 4*2.
    for i in (12..16).chain(24..26) {
        values[i] = 0.0;
    }
    let w = WeightVector::new(values).unwrap();
    let jac = a.weight_jacobian(&w, &[0.0; 3]).unwrap();
    for c in 0..12 {
        assert!(jac.column(c).iter().all(|&v| v == 0.0), "column {c}");
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let a = arch(&[3, 2], Activation::Tanh);
    let w = WeightVector::zeros(a.num_params());
    assert!(matches!(
        a.forward(&w, &[1.0, 2.0]),
        Err(Error::DimensionMismatch { .. })
    ));
    assert!(matches!(
        a.weight_jacobian(&WeightVector::zeros(3), &[1.0, 2.0, 3.0]),
        Err(Error::DimensionMismatch { .. })
    ));
}

fn reference_forward(model: &Model, x: &[f64]) -> Vec<f64> {
    let widths = model.arch.layer_widths();
    let w = model.weights.as_slice();
    let mut h = x.to_vec();
    let mut offset = 0;
    for l in 0..widths.len() - 1 {
        let (fi, fo) = (widths[l], widths[l + 1]);
        let mat = DMatrix::from_row_slice(fo, fi, &w[offset..offset + fi * fo]);
        let b = DVector::from_column_slice(&w[offset + fi * fo..offset + fi * fo + fo]);
        offset += (fi + 1) * fo;
        let z = mat * DVector::from_column_slice(&h) + b;
        h = if l + 2 < widths.len() {
            z.iter()
                .map(|&v| match model.arch.activation() {
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => v.max(0.0),
                })
                .collect()
        } else {
            z.iter().copied().collect()
        };
    }
    h
}

#[test]
fn teacher_matches_layer_by_layer_reference() {
    let teacher = datagen::make_teacher(16, 2, 0).unwrap();
    let mut r = rng::seeded(11);
    for _ in 0..5 {
        let x = normal_vec(&mut r, 16, 1.0);
        let got = teacher.label(&x).unwrap();
        let want = reference_forward(teacher.model(), &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

#[test]
fn jacobian_matches_finite_differences_on_random_nets() {
    for seed in 0..100 {
        let (a, w) = random_net(seed);
        let mut r = rng::seeded(1000 + seed);
        let x = normal_vec(&mut r, a.input_dim(), 1.0);
        let exact = a.weight_jacobian(&w, &x).unwrap();
        let fd = fd_jacobian(&a, &w, &x, 1e-5);
        let err = max_rel_err(&exact, &fd, 1e-3);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in 0..30 {
        let (a, w) = random_net(seed);
        let mut r = rng::seeded(500 + seed);
        let ex = random_examples(&mut r, &a, 1).pop().unwrap();
        let mut grad = vec![0.0; a.num_params()];
        let loss = a.loss_and_gradient(&w, &ex, &mut grad).unwrap();
        let direct = nll_loss(&a.forward(&w, &ex.input).unwrap(), &ex.target).unwrap();
        assert!(rel(loss, direct) < 1e-12);
        let h = 1e-6;
        let mut fd = DMatrix::zeros(1, w.len());
        for j in 0..w.len() {
            let mut p = w.clone();
            let mut m = w.clone();
            p.as_mut_slice()[j] += h;
            m.as_mut_slice()[j] -= h;
            let lp = a.mean_loss(&p, std::slice::from_ref(&ex)).unwrap();
            let lm = a.mean_loss(&m, std::slice::from_ref(&ex)).unwrap();
            fd[(0, j)] = (lp - lm) / (2.0 * h);
        }
        let exact = DMatrix::from_row_slice(1, grad.len(), &grad);
        let floor = exact.amax().max(1.0) * 1e-4;
        let err = max_rel_err(&exact, &fd, floor);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn nll_hand_cases() {
    let pred = GaussianPrediction::homoscedastic(DVector::from_vec(vec![1.0, -2.0]), 0.5);
    assert_eq!(nll_loss(&pred, &[1.0, -2.0]).unwrap(), 0.0);

    let pred = GaussianPrediction::homoscedastic(DVector::from_vec(vec![0.0]), 1.0);
    assert_eq!(nll_loss(&pred, &[2.0]).unwrap(), 2.0);

    // Full covariance: 0.5 r^T S^-1 r with S = [[2, 1], [1, 2]], r = [1, 1].
    let pred = GaussianPrediction {
        mean: DVector::zeros(2),
        covariance: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
    };
    assert!((nll_loss(&pred, &[1.0, 1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);

    assert!(matches!(
        nll_loss(&pred, &[1.0]),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn batch_loss_is_mean_of_example_losses() {
    let (a, w) = random_net(4);
    let mut r = rng::seeded(4);
    let data = random_examples(&mut r, &a, 17);
    let each: f64 = data
        .iter()
        .map(|ex| nll_loss(&a.forward(&w, &ex.input).unwrap(), &ex.target).unwrap())
        .sum::<f64>()
        / data.len() as f64;
    assert!(rel(a.mean_loss(&w, &data).unwrap(), each) < 1e-14);
}

fn opts(epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        epochs,
        learning_rate: 1e-3,
        minibatch_size: 10,
        seed,
    }
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let (a, w) = random_net(9);
    let mut r = rng::seeded(9);
    let data = random_examples(&mut r, &a, 8);
    let report = train(&a, &w, &data, &opts(0, 1)).unwrap();
    assert_eq!(report.weights, w);
    assert!(!report.loss_increased);
}

#[test]
fn empty_data_is_rejected() {
    let (a, w) = random_net(9);
    assert!(matches!(train(&a, &w, &[], &opts(5, 1)), Err(Error::EmptyData)));
}

#[test]
fn linear_fit_recovers_least_squares_slope() {
    let a = arch(&[1, 1], Activation::Tanh);
    let mut r = rng::seeded(21);
    let xs = normal_vec(&mut r, 50, 1.0);
    let data: Vec<LabeledExample> = xs
        .iter()
        .map(|&x| LabeledExample::new(vec![x], vec![2.0 * x]))
        .collect();
    // Least squares with intercept, solved in closed form.
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = data.iter().map(|e| e.target[0]).sum::<f64>() / n;
    let sxy: f64 = data.iter().map(|e| (e.input[0] - mx) * (e.target[0] - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let ls_slope = sxy / sxx;
    assert!((ls_slope - 2.0).abs() < 1e-12);

    let report = train(&a, &WeightVector::zeros(2), &data, &opts(200, 5)).unwrap();
    let slope = report.weights.as_slice()[0];
    assert!((slope - ls_slope).abs() < 0.1, "slope {slope}");
    assert!(report.final_loss < report.initial_loss);
}

#[test]
fn training_is_deterministic_in_its_seed() {
    let (a, w) = random_net(12);
    let mut r = rng::seeded(12);
    let data = random_examples(&mut r, &a, 40);
    let one = train(&a, &w, &data, &opts(20, 77)).unwrap();
    let two = train(&a, &w, &data, &opts(20, 77)).unwrap();
    assert_eq!(one.weights, two.weights);
    let other = train(&a, &w, &data, &opts(20, 78)).unwrap();
    assert_ne!(one.weights, other.weights);
}

#[test]
fn divergence_is_reported_with_its_epoch() {
    let a = arch(&[1, 1], Activation::Tanh);
    let data: Vec<LabeledExample> = (1..=10)
        .map(|i| LabeledExample::new(vec![i as f64 * 10.0], vec![1.0]))
        .collect();
    let big = TrainOptions {
        learning_rate: 10.0,
        ..opts(1000, 1)
    };
    match train(&a, &WeightVector::zeros(2), &data, &big) {
        Err(Error::TrainingDiverged { epoch }) => assert!(epoch < 1000),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn model_bytes_round_trip_through_a_file() {
    let (a, w) = random_net(31);
    let model = Model::new(a, w).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    std::fs::write(&path, model.to_bytes()).unwrap();
    let back = Model::read_from(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, model);
    let bytes = model.to_bytes();
    assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

proptest! {
    #[test]
    fn jacobian_rows_match_directional_derivatives(seed in 0u64..10_000, dir_seed in 0u64..1000) {
        let (a, w) = random_net(seed);
        let mut r = rng::seeded(dir_seed);
        let x = normal_vec(&mut r, a.input_dim(), 1.0);
        let v = normal_vec(&mut r, a.num_params(), 1.0);
        let jac = a.weight_jacobian(&w, &x).unwrap();
        let jv = &jac * DVector::from_column_slice(&v);
        let h = 1e-6;
        let shift = |s: f64| {
            let vals: Vec<f64> = w.as_slice().iter().zip(&v).map(|(a, b)| a + s * b).collect();
            forward_mean(&a, &WeightVector::new(vals).unwrap(), &x)
        };
        let (p, m) = (shift(h), shift(-h));
        for i in 0..a.output_dim() {
            let fd = (p[i] - m[i]) / (2.0 * h);
            prop_assert!((fd - jv[i]).abs() <= 1e-4 * jv[i].abs().max(1.0));
        }
    }

    #[test]
    fn nll_is_nonnegative_and_zero_only_at_the_mean(
        mean in proptest::collection::vec(-5.0f64..5.0, 1..4),
        offset in proptest::collection::vec(-5.0f64..5.0, 4),
        sigma in 0.05f64..3.0,
    ) {
        let pred = GaussianPrediction::homoscedastic(DVector::from_vec(mean.clone()), sigma);
        let y: Vec<f64> = mean.iter().zip(&offset).map(|(m, o)| m + o).collect();
        let loss = nll_loss(&pred, &y).unwrap();
        prop_assert!(loss >= 0.0);
        let sq: f64 = offset[..mean.len()].iter().map(|o| o * o).sum();
        prop_assert!((loss - sq / (2.0 * sigma * sigma)).abs() <= 1e-9 * loss.max(1.0));
    }
}
