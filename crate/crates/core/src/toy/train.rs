//! SGD training, accuracy evaluation and diagonal Fisher estimation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::ToyDataset;
use super::model::{argmax, cross_entropy, layers_to_checkpoint, softmax, ToyModel};
use super::HarnessError;
use crate::checkpoint::{Checkpoint, MODEL_ID_KEY};
use crate::merge::FisherWeights;

/// Metadata key set to `"true"` on the final emitted checkpoint.
pub const ANCHOR_FLAG_KEY: &str = "anchor";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning-rate factor for the output layer.
    pub head_lr_multiplier: f64,
    /// Number of evenly spaced checkpoints to emit (0 disables).
    pub checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 32,
            seed: 7,
            head_lr_multiplier: 10.0,
            checkpoints: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), HarnessError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.head_lr_multiplier.is_finite()
            && self.head_lr_multiplier > 0.0
            && self.batch_size > 0
            && self.checkpoints <= self.epochs.max(1);
        if ok {
            Ok(())
        } else {
            Err(HarnessError::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Mean cross-entropy over the whole dataset before training.
    pub initial_loss: f64,
    /// Mean cross-entropy over the whole dataset after training.
    pub final_loss: f64,
    /// Evenly spaced snapshots; the last one carries `anchor = "true"`.
    pub checkpoints: Vec<Checkpoint>,
}

/// Mean cross-entropy of `model` on `data`.
pub fn mean_loss(model: &ToyModel, data: &ToyDataset) -> f64 {
    let mut scratch = (Vec::new(), Vec::new());
    data.inputs
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| cross_entropy(&model.logits_into(x, &mut scratch), y))
        .sum::<f64>()
        / data.len() as f64
}

fn check_dims(model: &ToyModel, data: &ToyDataset) -> Result<(), HarnessError> {
    if model.input_dim() != 2 || model.output_dim() != data.classes {
        return Err(HarnessError::DimMismatch(format!(
            "model maps {} -> {} but data has 2 inputs and {} classes",
            model.input_dim(),
            model.output_dim(),
            data.classes
        )));
    }
    Ok(())
}

/// Minibatch SGD on softmax cross-entropy with a fixed, seeded shuffle.
pub fn train(model: &ToyModel, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    check_dims(model, data)?;
    let initial_loss = mean_loss(model, data);
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let head = model.layers().len() - 1;
    let snapshot_epochs: Vec<usize> = (1..=cfg.checkpoints)
        .map(|q| cfg.epochs * q / cfg.checkpoints)
        .collect();
    let mut checkpoints = Vec::with_capacity(cfg.checkpoints);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = model.zeros_like();
            for &i in batch {
                let (loss, g) = model.sample_gradient(&data.inputs[i], data.labels[i]);
                epoch_loss += loss;
                for (a, gl) in acc.iter_mut().zip(&g) {
                    a.weight.iter_mut().zip(&gl.weight).for_each(|(x, y)| *x += y);
                    a.bias.iter_mut().zip(&gl.bias).for_each(|(x, y)| *x += y);
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (l, (layer, g)) in model.layers_mut().iter_mut().zip(&acc).enumerate() {
                let step = if l == head { scale * cfg.head_lr_multiplier } else { scale };
                layer.weight.iter_mut().zip(&g.weight).for_each(|(w, d)| *w -= step * d);
                layer.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= step * d);
            }
        }
        if !epoch_loss.is_finite() {
            return Err(HarnessError::Divergence { epoch });
        }
        for (q, _) in snapshot_epochs.iter().enumerate().filter(|(_, e)| **e == epoch) {
            let mut c = model.to_checkpoint();
            c.set_metadata(MODEL_ID_KEY, format!("checkpoint-{}", q + 1));
            c.set_metadata("epoch", epoch.to_string());
            if q + 1 == cfg.checkpoints {
                c.set_metadata(ANCHOR_FLAG_KEY, "true");
            }
            checkpoints.push(c);
        }
    }
    let final_loss = mean_loss(&model, data);
    if !final_loss.is_finite() {
        return Err(HarnessError::Divergence { epoch: cfg.epochs });
    }
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss,
        checkpoints,
    })
}

fn accuracy_of(data: &ToyDataset, mut predict: impl FnMut(&[f64]) -> usize) -> f64 {
    let correct = data
        .inputs
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| predict(&x[..]) == y)
        .count();
    correct as f64 / data.len() as f64
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &ToyModel, data: &ToyDataset) -> Result<f64, HarnessError> {
    check_dims(model, data)?;
    let mut scratch = (Vec::new(), Vec::new());
    Ok(accuracy_of(data, |x| argmax(&softmax(&model.logits_into(x, &mut scratch)))))
}

/// Accuracy of the output ensemble: softmax outputs averaged over `models`.
pub fn ensemble_accuracy(models: &[ToyModel], data: &ToyDataset) -> Result<f64, HarnessError> {
    if models.is_empty() {
        return Err(HarnessError::InvalidConfig("empty ensemble".into()));
    }
    for m in models {
        check_dims(m, data)?;
    }
    let mut scratch = (Vec::new(), Vec::new());
    let mut avg = vec![0.0; data.classes];
    let m = models.len() as f64;
    Ok(accuracy_of(data, |x| {
        avg.iter_mut().for_each(|v| *v = 0.0);
        for model in models {
            let p = softmax(&model.logits_into(x, &mut scratch));
            avg.iter_mut().zip(&p).for_each(|(a, pi)| *a += pi);
        }
        avg.iter_mut().for_each(|v| *v /= m);
        argmax(&avg)
    }))
}

/// Single-model accuracy, or output-ensemble accuracy when `ensemble` is set.
pub fn evaluate(models: &[ToyModel], data: &ToyDataset, ensemble: bool) -> Result<f64, HarnessError> {
    if ensemble {
        ensemble_accuracy(models, data)
    } else {
        match models {
            [model] => accuracy(model, data),
            _ => Err(HarnessError::InvalidConfig(format!(
                "single-model evaluation got {} models",
                models.len()
            ))),
        }
    }
}

/// Diagonal empirical Fisher: per-parameter mean of squared log-likelihood
/// gradients at the true labels.
pub fn estimate_fisher(model: &ToyModel, data: &ToyDataset) -> Result<FisherWeights, HarnessError> {
    check_dims(model, data)?;
    let mut acc = model.zeros_like();
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let (_, g) = model.sample_gradient(x, y);
        for (a, gl) in acc.iter_mut().zip(&g) {
            a.weight.iter_mut().zip(&gl.weight).for_each(|(s, d)| *s += d * d);
            a.bias.iter_mut().zip(&gl.bias).for_each(|(s, d)| *s += d * d);
        }
    }
    let n = data.len() as f64;
    for a in &mut acc {
        a.weight.iter_mut().for_each(|v| *v /= n);
        a.bias.iter_mut().for_each(|v| *v /= n);
    }
    if acc
        .iter()
        .any(|l| l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()))
    {
        return Err(HarnessError::NonFiniteGradient);
    }
    let mut ckpt = layers_to_checkpoint(&acc);
    ckpt.set_metadata(MODEL_ID_KEY, "fisher");
    Ok(FisherWeights::new(ckpt)?)
}
