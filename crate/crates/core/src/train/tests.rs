use super::*;
use crate::estimate::{NnEstimator, LEAKY_SLOPE, DEFAULT_LAYER_SIZES};
use crate::physics::PhysicsConfig;

fn toy_sample(input: Vec<f64>, target: [f64; 2], weight: f64) -> TrainingSample {
    TrainingSample {
        input,
        target,
        weight,
        experiments: 1,
    }
}

fn random_batch(r: &mut SimRng, n_in: usize, size: usize) -> Vec<TrainingSample> {
    (0..size)
        .map(|_| {
            toy_sample(
                (0..n_in).map(|_| r.random_range(-1.0..1.0)).collect(),
                [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                r.random_range(0.1..1.1),
            )
        })
        .collect()
}

#[test]
fn weight_formula() {
    assert!((sample_weight(3.0, 3.0) - 1.1).abs() < 1e-15);
    assert!((sample_weight(0.05, 25.0) - 0.1).abs() < 1e-15);
    let mut r = rng::seeded(2);
    for _ in 0..10_000 {
        let a = r.random_range(0.05..25.0);
        let b = r.random_range(0.05..25.0);
        let w = sample_weight(a, b);
        // 0.1 + exp(-(A - B)^2 / 2) rounds to 0.1 once |A - B| exceeds ~8.5.
        assert!(w >= 0.1 && w <= 1.1);
    }
}

#[test]
fn generated_samples_have_the_network_shape() {
    let cfg = ReceiverConfig::default();
    let sampling = SamplingConfig::default();
    let mut r = rng::seeded(3);
    for _ in 0..20 {
        let s = generate_sample(&cfg, &sampling, &mut r).unwrap();
        assert_eq!(s.input.len(), 45);
        assert!((2..=200).contains(&s.experiments));
        assert_eq!(s.weight, sample_weight(s.target[1], s.input[44]));
    }
    let a = generate_dataset(&cfg, &sampling, 8, 5).unwrap();
    let b = generate_dataset(&cfg, &sampling, 8, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn phase_spread_interpretations() {
    let s = SamplingConfig::default();
    assert_eq!(s.phase_std(), 0.25);
    let v = SamplingConfig {
        phase_spread_is_variance: true,
        ..s
    };
    assert_eq!(v.phase_std(), 0.5);
}

#[test]
fn xavier_statistics() {
    let mut r = rng::seeded(4);
    let m = xavier_init(&[1000, 1000, 2], LEAKY_SLOPE, &mut r).unwrap();
    let (w, b) = m.layer(0);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((var - 1e-3).abs() < 1e-4, "var {var}");
    assert!(b.iter().all(|&x| x == 0.0));
    let again = xavier_init(&[1000, 1000, 2], LEAKY_SLOPE, &mut rng::seeded(4)).unwrap();
    assert_eq!(m, again);
}

#[test]
fn mse_examples() {
    let lw = LossWeights {
        phase: 1.0,
        intensity: 1.0,
    };
    let t = [[0.1, 2.0], [-0.3, 4.0]];
    assert_eq!(weighted_mse(&t, &t, &[1.0, 0.5], lw).unwrap(), 0.0);
    let l = weighted_mse(&[[0.1, 0.2]], &[[0.0, 0.0]], &[1.0], lw).unwrap();
    assert!((l - 0.05).abs() < 1e-15);
    let p = [[0.2, 2.5], [0.0, 3.0]];
    let a = weighted_mse(&p, &t, &[1.0, 0.5], lw).unwrap();
    let b = weighted_mse(&p, &t, &[7.0, 3.5], lw).unwrap();
    assert!((a - b).abs() < 1e-15);
    assert!(weighted_mse(&p, &t[..1], &[1.0, 1.0], lw).is_err());
}

/// Central-difference gradient of the batch loss, parameter by parameter.
fn numeric_gradient(model: &Mlp, batch: &[&TrainingSample], lw: LossWeights, h: f64) -> Vec<f64> {
    let mut m = model.clone();
    (0..model.params().len())
        .map(|i| {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = evaluate_loss(&m, batch, lw).unwrap();
            m.params_mut()[i] = orig - h;
            let down = evaluate_loss(&m, batch, lw).unwrap();
            m.params_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn backprop_matches_finite_differences() {
    let lw = LossWeights::default();
    let mut r = rng::seeded(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let model = xavier_init(&[5, 4, 3, 2], LEAKY_SLOPE, &mut r).unwrap();
        let batch = random_batch(&mut r, 5, 8);
        let refs: Vec<&TrainingSample> = batch.iter().collect();
        let (_, g) = backprop(&model, &refs, lw).unwrap();
        let num = numeric_gradient(&model, &refs, lw, 1e-5);
        for (a, n) in g.iter().zip(&num) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn zero_weight_samples_do_not_contribute() {
    let lw = LossWeights::default();
    let mut r = rng::seeded(6);
    let model = xavier_init(&[5, 4, 3, 2], LEAKY_SLOPE, &mut r).unwrap();
    let mut batch = random_batch(&mut r, 5, 4);
    let base: Vec<&TrainingSample> = batch[..2].iter().collect();
    let (l0, g0) = backprop(&model, &base, lw).unwrap();
    batch[2].weight = 0.0;
    batch[3].weight = 0.0;
    let all: Vec<&TrainingSample> = batch.iter().collect();
    let (l1, g1) = backprop(&model, &all, lw).unwrap();
    assert!((l0 - l1).abs() < 1e-14);
    for (a, b) in g0.iter().zip(&g1) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn gradient_vanishes_at_a_perfect_fit() {
    let mut r = rng::seeded(7);
    let model = xavier_init(&[5, 4, 3, 2], LEAKY_SLOPE, &mut r).unwrap();
    let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
    let out = model.forward(&x).unwrap();
    let s = toy_sample(x, [out[0], out[1]], 1.0);
    let (l, g) = backprop(&model, &[&s], LossWeights::default()).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn rmsprop_hand_step() {
    let cfg = TrainConfig::default();
    let mut opt = RmsProp::new(1, &cfg);
    let mut theta = [0.5];
    opt.step(&mut theta, &[1.0]).unwrap();
    let expect = 0.5 - 50e-6 * (1.0 / (0.1f64 + 1e-8).sqrt());
    assert!((theta[0] - expect).abs() < 1e-15);
    assert!(opt.mean_square()[0] >= 0.0);
}

#[test]
fn rmsprop_zero_gradient_coasts_then_stops() {
    let cfg = TrainConfig::default();
    let mut opt = RmsProp::new(1, &cfg);
    let mut theta = [0.0];
    opt.step(&mut theta, &[0.0]).unwrap();
    assert_eq!(theta[0], 0.0);
    opt.step(&mut theta, &[2.0]).unwrap();
    let mut prev = theta[0];
    for _ in 0..200 {
        opt.step(&mut theta, &[0.0]).unwrap();
        assert!(theta[0] <= prev);
        prev = theta[0];
    }
    // The momentum buffer has decayed to nothing.
    let before = theta[0];
    opt.step(&mut theta, &[0.0]).unwrap();
    assert!((theta[0] - before).abs() < 1e-20);
}

#[test]
fn rmsprop_moves_against_a_constant_gradient() {
    let cfg = TrainConfig::default();
    let mut opt = RmsProp::new(1, &cfg);
    let mut theta = [1.0];
    let mut prev = theta[0];
    for _ in 0..100 {
        opt.step(&mut theta, &[-0.3]).unwrap();
        assert!(theta[0] > prev);
        prev = theta[0];
    }
}

#[test]
fn memorizes_a_single_sample() {
    let s = toy_sample(vec![0.2, -0.4, 0.9, 0.1, 0.5], [0.3, 1.2], 1.0);
    let data = vec![s; 100];
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 60,
        batch_size: 10,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&[5, 8, 8, 2], LEAKY_SLOPE, &data, &cfg, 1).unwrap();
    assert_eq!(out.history.len(), 60);
    let last = out.history.last().unwrap().train_loss;
    assert!(last < 1e-4, "loss {last}");
    assert!(last < out.history[0].train_loss);
    assert!(out.history.iter().all(|h| h.train_loss.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let mut r = rng::seeded(8);
    let data = random_batch(&mut r, 5, 64);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let a = train(&[5, 4, 2], LEAKY_SLOPE, &data, &cfg, 3).unwrap();
    let b = train(&[5, 4, 2], LEAKY_SLOPE, &data, &cfg, 3).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
}

#[test]
fn annealing_switches_the_learning_rate() {
    let mut r = rng::seeded(8);
    let data = random_batch(&mut r, 5, 64);
    let base = TrainConfig {
        learning_rate: 1e-3,
        epochs: 4,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let slow = TrainConfig {
        learning_rate: 2e-4,
        ..base
    };
    let annealed_all = TrainConfig {
        anneal_epochs: 4,
        anneal_learning_rate: 2e-4,
        ..base
    };
    let a = train(&[5, 4, 2], LEAKY_SLOPE, &data, &slow, 3).unwrap();
    let b = train(&[5, 4, 2], LEAKY_SLOPE, &data, &annealed_all, 3).unwrap();
    assert_eq!(a.model, b.model);
    let c = train(&[5, 4, 2], LEAKY_SLOPE, &data, &TrainConfig { anneal_epochs: 2, ..annealed_all }, 3).unwrap();
    assert_ne!(a.model, c.model);
    assert!(TrainConfig { anneal_epochs: 5, ..base }.validate().is_err());
}

#[test]
fn divergence_is_reported() {
    let s = toy_sample(vec![1e200; 5], [0.0, 0.0], 1.0);
    let cfg = TrainConfig {
        epochs: 2,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let err = train(&[5, 4, 2], LEAKY_SLOPE, &vec![s; 4], &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn model_file_round_trip() {
    let mut r = rng::seeded(9);
    let model = xavier_init(&DEFAULT_LAYER_SIZES, LEAKY_SLOPE, &mut r).unwrap();
    let meta = ModelMetadata {
        seed: 9,
        epochs: 200,
        dataset_size: 100_000,
        final_train_loss: Some(0.0123),
        final_validation_loss: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&path, &model, &meta).unwrap();
    let (back, meta_back) = load_model(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(meta_back, meta);
    NnEstimator::new(back, &ReceiverConfig::default()).unwrap();
}

#[test]
fn model_file_errors() {
    let model = Mlp::zeros(&[3, 2, 2], LEAKY_SLOPE).unwrap();
    let text = model_to_string(&model, &ModelMetadata::default());

    // Truncated document: error carries a position.
    let err = model_from_str(&text[..text.len() / 2], "cut").unwrap_err();
    assert!(err.to_string().contains("line"), "{err}");

    // Declared input size disagrees with the weight block.
    let bad = text.replacen("\"layer_sizes\": [\n    3,", "\"layer_sizes\": [\n    4,", 1);
    assert_ne!(bad, text);
    assert!(model_from_str(&bad, "bad").is_err());

    // Well-formed model for the wrong receiver.
    let (m, _) = model_from_str(&text, "ok").unwrap();
    assert!(NnEstimator::new(m, &ReceiverConfig::default()).is_err());
}

#[test]
fn zero_phase_spread_still_trains_shapes() {
    let cfg = ReceiverConfig {
        physics: PhysicsConfig::default(),
        ..ReceiverConfig::default()
    };
    let sampling = SamplingConfig {
        phase_spread: 0.0,
        experiments_max: 3,
        ..SamplingConfig::default()
    };
    let data = generate_dataset(&cfg, &sampling, 4, 1).unwrap();
    assert!(data.iter().all(|s| s.target[0] == 0.0));
}
