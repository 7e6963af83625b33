//! Built-in differentiable classifiers: multinomial logistic regression and
//! small tanh MLPs with a softmax head, trained by full-batch gradient descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Dense affine layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: Matrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut layer = Layer::zeros(fan_in, fan_out);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-bound..=bound);
        }
        layer
    }

    fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.fan_out()).map(|o| dot(self.weights.row(o), input) + self.bias[o]));
    }

    fn axpy(&mut self, alpha: f64, other: &Layer) {
        for (w, g) in self.weights.as_mut_slice().iter_mut().zip(other.weights.as_slice()) {
            *w += alpha * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&other.bias) {
            *b += alpha * g;
        }
    }
}

/// Feed-forward network: tanh hidden layers, softmax output.
///
/// A network with a single layer is a linear softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Per-epoch loss values recorded by the trainers.
#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub losses: Vec<f64>,
    pub final_learning_rate: f64,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Dimension {
                    expected: pair[0].fan_out(),
                    actual: pair[1].fan_in(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Dimension {
                    expected: l.fan_out(),
                    actual: l.bias.len(),
                });
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::param("network parameters must be finite"));
            }
        }
        if layers[layers.len() - 1].fan_out() < 2 {
            return Err(Error::param("classifier needs at least two classes"));
        }
        Ok(Network { layers })
    }

    /// Linear softmax classifier `softmax(W x + b)`; `weights` is `C × D`.
    pub fn softmax_linear(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        Network::new(vec![Layer { weights, bias }])
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        Network {
            layers: vec![Layer::zeros(dim, classes)],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn is_linear(&self) -> bool {
        self.layers.len() == 1
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(&acts[l], &mut out);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    /// Class probabilities for a single input, written into `out`.
    pub fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        let acts = self.activations(x);
        softmax_into(&acts[acts.len() - 1], out);
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.class_count()];
        self.predict_into(x, &mut p);
        p
    }

    /// Cross-entropy `-ln p_label` computed from logits without clamping.
    pub fn loss(&self, x: &[f64], label: usize) -> f64 {
        let acts = self.activations(x);
        let logits = &acts[acts.len() - 1];
        log_sum_exp(logits) - logits[label]
    }

    /// Back-propagates the cross-entropy at `(x, label)`. Parameter gradients
    /// are accumulated into `param_grads` (scaled by `scale`) when given; the
    /// gradient with respect to `x` is returned.
    fn backward(
        &self,
        x: &[f64],
        label: usize,
        mut param_grads: Option<(&mut [Layer], f64)>,
    ) -> (f64, Vec<f64>) {
        let acts = self.activations(x);
        let logits = &acts[acts.len() - 1];
        let loss = log_sum_exp(logits) - logits[label];
        let mut delta = vec![0.0; logits.len()];
        softmax_into(logits, &mut delta);
        delta[label] -= 1.0;

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &acts[l];
            if let Some((grads, scale)) = param_grads.as_mut() {
                let g = &mut grads[l];
                for (o, &d) in delta.iter().enumerate() {
                    let row = g.weights.row_mut(o);
                    for (w, &a) in row.iter_mut().zip(input) {
                        *w += *scale * d * a;
                    }
                    g.bias[o] += *scale * d;
                }
            }
            let mut prev = vec![0.0; layer.fan_in()];
            for (o, &d) in delta.iter().enumerate() {
                for (p, &w) in prev.iter_mut().zip(layer.weights.row(o)) {
                    *p += w * d;
                }
            }
            if l > 0 {
                // input to this layer is tanh output of the previous one
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        (loss, delta)
    }

    /// Gradient of `-ln p_label(x)` with respect to the input.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Vec<f64> {
        self.backward(x, label, None).1
    }

    /// Mean cross-entropy over a labelled sample.
    pub fn mean_loss(&self, points: &Matrix, labels: &[usize]) -> f64 {
        let total: f64 = points
            .iter_rows()
            .zip(labels)
            .map(|(x, &y)| self.loss(x, y))
            .sum();
        total / points.rows() as f64
    }

    fn mean_gradient(&self, points: &Matrix, labels: &[usize]) -> Vec<Layer> {
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
            .collect();
        let scale = 1.0 / points.rows() as f64;
        for (x, &y) in points.iter_rows().zip(labels) {
            self.backward(x, y, Some((&mut grads, scale)));
        }
        grads
    }

    /// Full-batch gradient descent on mean cross-entropy. A step that would
    /// increase the loss is rejected and the learning rate halved, so the
    /// recorded loss sequence is non-increasing.
    pub fn fit(
        &mut self,
        points: &Matrix,
        labels: &[usize],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<TrainingTrace> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::param("learning rate must be finite and >= 0"));
        }
        if points.cols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: points.cols(),
            });
        }
        let mut lr = learning_rate;
        let mut loss = self.mean_loss(points, labels);
        let mut trace = TrainingTrace {
            losses: vec![loss],
            final_learning_rate: lr,
        };
        'epochs: for _ in 0..epochs {
            let grads = self.mean_gradient(points, labels);
            loop {
                let mut candidate = self.clone();
                for (layer, g) in candidate.layers.iter_mut().zip(&grads) {
                    layer.axpy(-lr, g);
                }
                let candidate_loss = candidate.mean_loss(points, labels);
                if candidate_loss <= loss {
                    *self = candidate;
                    loss = candidate_loss;
                    break;
                }
                lr *= 0.5;
                if lr < 1e-12 {
                    log::debug!("learning rate underflow, stopping early at loss {loss}");
                    break 'epochs;
                }
            }
            trace.losses.push(loss);
        }
        trace.final_learning_rate = lr;
        Ok(trace)
    }
}

fn labelled(data: &Dataset) -> Result<(&[usize], usize)> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Data("training requires labels".into()))?;
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateLabels);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    if data.len() < classes {
        return Err(Error::param(format!(
            "need at least {classes} points to train {classes} classes"
        )));
    }
    Ok((labels, classes))
}

/// Multinomial logistic regression from the zero initialization.
pub fn train_softmax_network(
    data: &Dataset,
    epochs: usize,
    learning_rate: f64,
) -> Result<(Network, TrainingTrace)> {
    let (labels, classes) = labelled(data)?;
    let mut net = Network::zeros(data.dim(), classes);
    let trace = net.fit(data.points(), labels, epochs, learning_rate)?;
    Ok((net, trace))
}

/// Tanh MLP with uniform `±1/√fan_in` initialization. Empty `hidden_sizes`
/// falls back to the linear softmax model.
pub fn train_mlp_network(
    data: &Dataset,
    hidden_sizes: &[usize],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(Network, TrainingTrace)> {
    if hidden_sizes.is_empty() {
        return train_softmax_network(data, epochs, learning_rate);
    }
    if hidden_sizes.len() > 2 || hidden_sizes.contains(&0) {
        return Err(Error::param("one or two non-empty hidden layers are supported"));
    }
    let (labels, classes) = labelled(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![data.dim()];
    sizes.extend_from_slice(hidden_sizes);
    sizes.push(classes);
    let layers = sizes
        .windows(2)
        .map(|w| Layer::uniform(w[0], w[1], &mut rng))
        .collect();
    let mut net = Network { layers };
    let trace = net.fit(data.points(), labels, epochs, learning_rate)?;
    Ok((net, trace))
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}
