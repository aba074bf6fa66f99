use layermerge::toy::{
    accuracy, ensemble_accuracy, estimate_fisher, evaluate, make_domain_pair, sample_domain, train, DomainShift,
    HarnessError, ToyModel, TrainConfig,
};

fn source(seed: u64, n: usize, classes: usize) -> layermerge::toy::ToyDataset {
    sample_domain(seed, n, classes, DomainShift::default()).unwrap()
}

// Recorded from the first run of the default configuration below.
const DEFAULT_FINAL_LOSS: f64 = 0.0009383710809514708;
const DEFAULT_ACCURACY: f64 = 1.0;

#[test]
fn default_training_regression() {
    let data = source(7, 600, 3);
    let model = ToyModel::init(&[2, 16, 16, 3], 7).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!((cfg.learning_rate, cfg.epochs, cfg.seed), (0.05, 200, 7));
    let out = train(&model, &data, &cfg).unwrap();
    let acc = accuracy(&out.model, &data).unwrap();
    assert!(out.final_loss < out.initial_loss);
    assert!(acc >= 0.9, "accuracy {acc}");
    assert!((out.final_loss - DEFAULT_FINAL_LOSS).abs() <= 1e-9 * DEFAULT_FINAL_LOSS, "loss {}", out.final_loss);
    assert_eq!(acc, DEFAULT_ACCURACY);
}

#[test]
fn training_is_deterministic() {
    let data = source(11, 150, 4);
    let model = ToyModel::init(&[2, 8, 4], 1).unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        checkpoints: 4,
        ..TrainConfig::default()
    };
    let a = train(&model, &data, &cfg).unwrap();
    let b = train(&model, &data, &cfg).unwrap();
    assert_eq!(a.model.to_checkpoint().to_bytes().unwrap(), b.model.to_checkpoint().to_bytes().unwrap());
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.checkpoints.len(), 4);
    assert_eq!(a.checkpoints[3].metadata().get("anchor").map(String::as_str), Some("true"));
    assert_eq!(a.checkpoints[3].tensors(), a.model.to_checkpoint().tensors());

    let reseeded = train(&model, &data, &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(reseeded.model.to_checkpoint(), a.model.to_checkpoint());
}

#[test]
fn probabilities_are_normalized() {
    let model = ToyModel::init(&[2, 16, 16, 5], 3).unwrap();
    let data = source(3, 500, 5);
    for x in &data.inputs {
        let p = model.probabilities(x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // far-out inputs push logits to large magnitudes
    let p = model.probabilities(&[1e4, -1e4]);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
}

#[test]
fn evaluate_dispatches_single_and_ensemble() {
    let (s, t) = make_domain_pair(5, 300, 3, DomainShift { rotation: 0.6, translation: [0.3, 0.0] }).unwrap();
    let models: Vec<ToyModel> = (0..3).map(|k| ToyModel::init(&[2, 8, 3], k).unwrap()).collect();
    assert_eq!(evaluate(&models[..1], &s, false).unwrap(), accuracy(&models[0], &s).unwrap());
    assert_eq!(evaluate(&models, &t, true).unwrap(), ensemble_accuracy(&models, &t).unwrap());
    assert!(matches!(evaluate(&models, &s, false), Err(HarnessError::InvalidConfig(_))));
    let wrong = ToyModel::init(&[2, 8, 4], 0).unwrap();
    assert!(matches!(accuracy(&wrong, &s), Err(HarnessError::DimMismatch(_))));
}

fn sample_loss(model: &ToyModel, x: &[f64; 2], y: usize) -> f64 {
    let logits = model.logits(x);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() - logits[y]
}

#[test]
fn fisher_matches_squared_finite_difference_gradients() {
    let model = ToyModel::init(&[2, 8, 3], 21).unwrap();
    let data = source(21, 50, 3);
    // drop samples whose hidden units sit near the rectifier kink
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| model.forward(&data.inputs[i]).pre_activations[0].iter().all(|z| z.abs() >= 1e-3))
        .collect();
    assert!(keep.len() >= 40, "{} samples kept", keep.len());
    let data = data.select(&keep);
    let fisher = estimate_fisher(&model, &data).unwrap();

    let h = 1e-5;
    let mut compared = 0;
    for (l, layer) in model.layers().iter().enumerate() {
        let (n_w, n_b) = (layer.weight.len(), layer.bias.len());
        let analytic_w = fisher.get(&format!("l{l}.weight")).unwrap().data().to_f64_vec();
        let analytic_b = fisher.get(&format!("l{l}.bias")).unwrap().data().to_f64_vec();
        for idx in 0..n_w + n_b {
            let mut sum_sq = 0.0;
            for (x, &y) in data.inputs.iter().zip(&data.labels) {
                let loss_at = |delta: f64| {
                    let mut m = model.clone();
                    let target = &mut m.layers_mut()[l];
                    if idx < n_w {
                        target.weight[idx] += delta;
                    } else {
                        target.bias[idx - n_w] += delta;
                    }
                    sample_loss(&m, x, y)
                };
                let g = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                sum_sq += g * g;
            }
            let numeric = sum_sq / data.len() as f64;
            let analytic = if idx < n_w { analytic_w[idx] } else { analytic_b[idx - n_w] };
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-10 {
                continue;
            }
            assert!(
                (analytic - numeric).abs() <= 1e-4 * scale,
                "l{l} param {idx}: analytic {analytic} vs numeric {numeric}"
            );
            compared += 1;
        }
    }
    assert!(compared > 40);
}

#[test]
fn fisher_is_deterministic_and_follows_model_layout() {
    let model = ToyModel::init(&[2, 6, 3], 4).unwrap();
    let data = source(4, 90, 3);
    let a = estimate_fisher(&model, &data).unwrap();
    let b = estimate_fisher(&model, &data).unwrap();
    assert_eq!(a.as_checkpoint(), b.as_checkpoint());
    let names: Vec<&str> = a.as_checkpoint().tensors().iter().map(|t| t.name()).collect();
    assert_eq!(names, vec!["l0.weight", "l0.bias", "l1.weight", "l1.bias"]);
}
