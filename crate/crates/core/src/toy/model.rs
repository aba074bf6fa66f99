//! A small fully connected rectifier network stored as a checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::checkpoint::{Checkpoint, TensorRecord};

/// Dense layer with a row-major `[outputs, inputs]` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi)
        }));
    }
}

/// Rectifier MLP: `l0 .. l{L-1}`, ReLU on hidden layers, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<DenseLayer>,
}

/// Gradient with the same layout as [`ToyModel`]'s layers.
pub type Gradients = Vec<DenseLayer>;

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last entry is the logits.
    pub pre_activations: Vec<Vec<f64>>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ToyModel {
    /// He-uniform weights and zero biases for layer widths `dims`
    /// (input first, classes last).
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, HarnessError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(HarnessError::InvalidConfig(format!(
                "layer widths {dims:?} must have at least two positive entries"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = (6.0 / inputs as f64).sqrt();
                let mut layer = DenseLayer::zeros(inputs, outputs);
                for v in &mut layer.weight {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, HarnessError> {
        if layers.is_empty() {
            return Err(HarnessError::InvalidConfig("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(HarnessError::InvalidConfig(format!("layer l{i} has inconsistent buffers")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(HarnessError::DimMismatch(format!(
                    "layer l{i} has {} outputs but l{} expects {} inputs",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Same architecture, all parameters zero.
    pub fn zeros_like(&self) -> Gradients {
        self.layers
            .iter()
            .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
            .collect()
    }

    /// Tensors `l{i}.weight` (`[out, in]`) and `l{i}.bias` (`[out]`) in f64.
    pub fn to_checkpoint(&self) -> Checkpoint {
        layers_to_checkpoint(&self.layers)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, HarnessError> {
        let mut layers = Vec::new();
        loop {
            let i = layers.len();
            let (w, b) = match (ckpt.get(&format!("l{i}.weight")), ckpt.get(&format!("l{i}.bias"))) {
                (Some(w), Some(b)) => (w, b),
                (None, None) => break,
                _ => {
                    return Err(HarnessError::InvalidModel(format!(
                        "layer l{i} needs both weight and bias"
                    )))
                }
            };
            let (outputs, inputs) = match w.shape() {
                [o, i] => (*o, *i),
                s => return Err(HarnessError::InvalidModel(format!("l{i}.weight has shape {s:?}"))),
            };
            if b.shape() != [outputs] {
                return Err(HarnessError::InvalidModel(format!(
                    "l{i}.bias has shape {:?}, expected [{outputs}]",
                    b.shape()
                )));
            }
            layers.push(DenseLayer {
                inputs,
                outputs,
                weight: w.data().to_f64_vec(),
                bias: b.data().to_f64_vec(),
            });
        }
        if layers.len() * 2 != ckpt.len() {
            return Err(HarnessError::InvalidModel(format!(
                "checkpoint has {} tensors but only {} dense layers",
                ckpt.len(),
                layers.len()
            )));
        }
        Self::from_layers(layers)
    }

    pub fn forward(&self, x: &[f64]) -> ForwardTrace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.forward_into(&activations[l], &mut z);
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        ForwardTrace {
            activations,
            pre_activations,
        }
    }

    /// Logits for one input, reusing `scratch` buffers.
    pub fn logits_into(&self, x: &[f64], scratch: &mut (Vec<f64>, Vec<f64>)) -> Vec<f64> {
        let (cur, next) = scratch;
        cur.clear();
        cur.extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward_into(cur, next);
            if l != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(cur, next);
        }
        cur.clone()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_into(x, &mut (Vec::new(), Vec::new()))
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Cross-entropy loss of one sample and its gradient w.r.t. every parameter.
    pub fn sample_gradient(&self, x: &[f64], label: usize) -> (f64, Gradients) {
        let trace = self.forward(x);
        let logits = trace.pre_activations.last().expect("at least one layer");
        let loss = cross_entropy(logits, label);
        let mut delta = softmax(logits);
        delta[label] -= 1.0;

        let mut grads = self.zeros_like();
        for l in (0..self.layers.len()).rev() {
            let input = &trace.activations[l];
            let g = &mut grads[l];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] = *d;
                let row = &mut g.weight[o * g.inputs..(o + 1) * g.inputs];
                for (w, a) in row.iter_mut().zip(input) {
                    *w = d * a;
                }
            }
            if l > 0 {
                let layer = &self.layers[l];
                let z_prev = &trace.pre_activations[l - 1];
                delta = (0..layer.inputs)
                    .map(|i| {
                        if z_prev[i] <= 0.0 {
                            return 0.0;
                        }
                        delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| layer.weight[o * layer.inputs + i] * d)
                            .sum()
                    })
                    .collect();
            }
        }
        (loss, grads)
    }
}

pub(crate) fn layers_to_checkpoint(layers: &[DenseLayer]) -> Checkpoint {
    let mut ckpt = Checkpoint::empty();
    let mut order = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        ckpt.push(
            TensorRecord::f64(format!("l{i}.weight"), vec![l.outputs, l.inputs], l.weight.clone())
                .expect("consistent layer"),
        )
        .expect("unique names");
        ckpt.push(TensorRecord::f64(format!("l{i}.bias"), vec![l.outputs], l.bias.clone()).expect("consistent layer"))
            .expect("unique names");
        order.push(format!("l{i}"));
    }
    ckpt.set_layer_order(&order);
    ckpt
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyModel::init(&[2, 16, 16, 3], 4).unwrap();
        let c = m.to_checkpoint();
        assert_eq!(c.len(), 6);
        let back = ToyModel::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = ToyModel::init(&[2, 8, 3], 1).unwrap();
        for x in [[0.0, 0.0], [5.0, -3.0], [100.0, 100.0]] {
            let p = m.probabilities(&x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn incompatible_layers_rejected() {
        let a = DenseLayer::zeros(2, 4);
        let b = DenseLayer::zeros(3, 2);
        assert!(matches!(
            ToyModel::from_layers(vec![a, b]),
            Err(HarnessError::DimMismatch(_))
        ));
    }

    #[test]
    fn logits_match_trace() {
        let m = ToyModel::init(&[2, 5, 4, 3], 2).unwrap();
        let x = [0.3, -0.8];
        assert_eq!(&m.logits(&x), m.forward(&x).pre_activations.last().unwrap());
    }
}
