mod common;

use common::*;
use dlm_core::datagen::{
    corruption_block_len, generate_batch, make_teacher, next_batch, oracle_label, training_set,
    write_stream_csv, RegimeKind, StreamConfig,
};
use dlm_core::experiment::{Experiment, ExperimentConfig};
use dlm_core::nnet::{LabeledExample, TrainOptions};
use dlm_core::rng;
use dlm_core::Error;
use proptest::prelude::*;

fn stream(mix: [f64; 3], degradation: f64, seed: u64) -> StreamConfig {
    StreamConfig {
        regime_mix: mix,
        degradation_max: degradation,
        seed,
        ..StreamConfig::default()
    }
}

#[test]
fn teacher_output_has_positive_finite_variance() {
    let t = make_teacher(16, 2, 0).unwrap();
    let mut r = rng::seeded(1);
    let ys: Vec<Vec<f64>> = (0..1000).map(|_| t.label(&normal_vec(&mut r, 16, 1.0)).unwrap()).collect();
    for d in 0..2 {
        let mean = ys.iter().map(|y| y[d]).sum::<f64>() / 1000.0;
        let var = ys.iter().map(|y| (y[d] - mean).powi(2)).sum::<f64>() / 999.0;
        assert!(var.is_finite() && var > 0.0, "output {d}: variance {var}");
    }
}

#[test]
fn teacher_seed_controls_outputs_on_a_grid() {
    let (a, b, c) = (make_teacher(3, 2, 5).unwrap(), make_teacher(3, 2, 5).unwrap(), make_teacher(3, 2, 6).unwrap());
    let mut differs = false;
    for i in -2..=2 {
        for j in -2..=2 {
            let x = [i as f64, j as f64, 0.5];
            assert_eq!(a.label(&x).unwrap(), b.label(&x).unwrap());
            differs |= a.label(&x).unwrap() != c.label(&x).unwrap();
        }
    }
    assert!(differs);
}

#[test]
fn oracle_is_the_teacher_forward_pass() {
    let t = make_teacher(4, 2, 2).unwrap();
    let x = [0.1, -0.7, 1.2, 3.0];
    let direct: Vec<f64> = t.model().forward(&x).unwrap().mean.iter().copied().collect();
    assert_eq!(oracle_label(&t, &x).unwrap(), direct);
    assert_eq!(oracle_label(&t, &x).unwrap(), oracle_label(&t, &x).unwrap());
}

#[test]
fn noiseless_training_targets_are_exact_and_inputs_centered() {
    let t = make_teacher(16, 2, 3).unwrap();
    assert_eq!(training_set(&t, 300, 0.1, 4).unwrap().len(), 300);
    let data = training_set(&t, 10_000, 0.0, 4).unwrap();
    for ex in data.iter().take(50) {
        assert_eq!(ex.target, t.label(&ex.input).unwrap());
    }
    for d in 0..16 {
        let mean = data.iter().map(|e| e.input[d]).sum::<f64>() / data.len() as f64;
        assert!(mean.abs() <= 0.05, "coordinate {d}: mean {mean}");
    }
    assert!(matches!(training_set(&t, 0, 0.0, 4), Err(Error::EmptyData)));
}

#[test]
fn first_batch_is_never_degraded() {
    let cfg = stream([1.0, 0.0, 0.0], 0.1, 8);
    assert_eq!(cfg.degradation_probability(0), 0.0);
    let b = generate_batch(&cfg, 16, 0).unwrap();
    assert!(b.inputs.iter().flatten().all(|&v| v != 0.0));
    assert!(b.regime_tags.iter().all(|&t| t == RegimeKind::InDistribution));
}

#[test]
fn final_batch_degradation_rate_is_binomial() {
    let cfg = StreamConfig {
        batch_size: 6250,
        ..stream([1.0, 0.0, 0.0], 0.1, 9)
    };
    let b = generate_batch(&cfg, 16, cfg.num_batches - 1).unwrap();
    let coords = b.inputs.len() * 16;
    assert_eq!(coords, 100_000);
    let zeros = b.inputs.iter().flatten().filter(|&&v| v == 0.0).count();
    let rate = zeros as f64 / coords as f64;
    assert!((rate - 0.1).abs() <= 0.005, "rate {rate}");
}

#[test]
fn regime_frequencies_follow_the_mix() {
    for mix in [[1.0 / 3.0; 3], [0.6, 0.3, 0.1], [0.0, 0.5, 0.5]] {
        let cfg = StreamConfig {
            num_batches: 500,
            ..stream(mix, 0.0, 10)
        };
        let mut counts = [0usize; 3];
        for i in 0..cfg.num_batches {
            for tag in generate_batch(&cfg, 4, i).unwrap().regime_tags {
                counts[tag.index()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert!(total >= 10_000);
        for (c, p) in counts.iter().zip(mix) {
            let f = *c as f64 / total as f64;
            assert!((f - p).abs() <= 0.02, "mix {mix:?}: frequency {f}");
        }
    }
}

#[test]
fn shifted_and_corrupted_regimes_move_the_inputs() {
    let d = 16;
    let shifted = StreamConfig { num_batches: 50, ..stream([0.0, 1.0, 0.0], 0.0, 11) };
    let mut sums = vec![0.0; d];
    let mut n = 0.0;
    for i in 0..shifted.num_batches {
        for x in generate_batch(&shifted, d, i).unwrap().inputs {
            for (s, v) in sums.iter_mut().zip(&x) {
                *s += v;
            }
            n += 1.0;
        }
    }
    for (i, s) in sums.iter().enumerate() {
        let want = if i < d.div_ceil(2) { 3.0 } else { 0.0 };
        assert!((s / n - want).abs() < 0.15, "coordinate {i}: {}", s / n);
    }

    // A corrupted input has one contiguous amplified block; its energy shows
    // up as a larger second moment than a clean input.
    assert_eq!(corruption_block_len(16), 4);
    assert_eq!(corruption_block_len(5), 2);
    let corrupted = StreamConfig { num_batches: 50, ..stream([0.0, 0.0, 1.0], 0.0, 12) };
    let mut sq = 0.0;
    let mut count = 0.0;
    for i in 0..corrupted.num_batches {
        for x in generate_batch(&corrupted, d, i).unwrap().inputs {
            sq += x.iter().map(|v| v * v).sum::<f64>();
            count += d as f64;
        }
    }
    // Expected second moment: (12 + 4 * 9) / 16 = 3.
    assert!((sq / count - 3.0).abs() < 0.15, "{}", sq / count);
}

#[test]
fn stream_is_reproducible_and_indexed() {
    let t = make_teacher(16, 2, 0).unwrap();
    let cfg = stream([1.0 / 3.0; 3], 0.1, 13);
    for i in [0, 37, 99] {
        assert_eq!(next_batch(&cfg, &t, i).unwrap(), next_batch(&cfg, &t, i).unwrap());
    }
    assert_ne!(next_batch(&cfg, &t, 1).unwrap(), next_batch(&cfg, &t, 2).unwrap());
    let other = StreamConfig { seed: 14, ..cfg.clone() };
    assert_ne!(next_batch(&cfg, &t, 5).unwrap(), next_batch(&other, &t, 5).unwrap());
    assert!(matches!(
        next_batch(&cfg, &t, 100),
        Err(Error::BatchIndexOutOfRange { index: 100, len: 100 })
    ));
}

#[test]
fn invalid_stream_configs_are_rejected() {
    assert!(stream([0.5, 0.5, 0.1], 0.0, 0).validate().is_err());
    assert!(stream([1.2, -0.2, 0.0], 0.0, 0).validate().is_err());
    assert!(stream([1.0, 0.0, 0.0], 0.2, 0).validate().is_err());
    assert!(StreamConfig { batch_size: 0, ..StreamConfig::default() }.validate().is_err());
    assert!(StreamConfig::default().validate().is_ok());
}

#[test]
fn stream_csv_lists_every_input() {
    let cfg = StreamConfig { num_batches: 3, batch_size: 4, ..stream([0.5, 0.5, 0.0], 0.0, 15) };
    let batches: Vec<_> = (0..3).map(|i| generate_batch(&cfg, 2, i).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stream.csv");
    write_stream_csv(&path, &batches).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["batch_index", "x0", "x1", "regime"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(&rows[5][0], "1");
    assert_eq!(rows[5][1].parse::<f64>().unwrap(), batches[1].inputs[1][0]);
    assert_eq!(&rows[5][3], batches[1].regime_tags[1].name());
}

#[test]
fn retraining_on_an_in_distribution_batch_keeps_held_out_loss() {
    let cfg = ExperimentConfig::default();
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let exp = Experiment::prepare(&cfg, seed).unwrap();
        let mut r = rng::seeded(seed + 100);
        let held_out: Vec<LabeledExample> = (0..500)
            .map(|_| {
                let x = normal_vec(&mut r, cfg.d_in, 1.0);
                let y = oracle_label(&exp.teacher, &x).unwrap();
                LabeledExample::new(x, y)
            })
            .collect();
        let ind = StreamConfig { degradation_max: 0.0, ..stream([1.0, 0.0, 0.0], 0.0, seed) };
        let batch = next_batch(&ind, &exp.teacher, 0).unwrap();
        let labeled = exp.teacher.label_all(&batch.inputs).unwrap();
        let before = exp.model.mean_loss(&held_out).unwrap();
        let mut model = exp.model.clone();
        let opts = TrainOptions { epochs: 200, learning_rate: 1e-3, minibatch_size: 20, seed };
        model.train(&labeled, &opts).unwrap();
        ratios.push(model.mean_loss(&held_out).unwrap() / before);
    }
    let med = median(&ratios);
    assert!(med <= 1.10, "median held-out loss ratio {med}");
}

proptest! {
    #[test]
    fn batches_are_finite_and_sized(seed in 0u64..1000, index in 0usize..100, d in 1usize..20) {
        let cfg = stream([0.2, 0.4, 0.4], 0.1, seed);
        let b = generate_batch(&cfg, d, index).unwrap();
        prop_assert_eq!(b.len(), cfg.batch_size);
        prop_assert_eq!(b.regime_tags.len(), cfg.batch_size);
        prop_assert!(b.inputs.iter().all(|x| x.len() == d && x.iter().all(|v| v.is_finite())));
    }
}
