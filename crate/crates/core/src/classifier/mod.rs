//! Probabilistic classifiers `f : S → P(C)` and adversarial probing.

mod external;
mod network;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use external::{ExternalClassifier, Transport};
pub use network::{
    train_mlp_network, train_softmax_network, Layer, Network, TrainingTrace,
};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BATCH_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    SoftmaxLinear,
    Mlp,
    External,
}

#[derive(Debug)]
enum Backend {
    Network(Network),
    External(ExternalClassifier),
}

/// Shared, immutable handle to a classifier. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct ClassifierHandle {
    backend: Arc<Backend>,
    batch_limit: usize,
    id: Arc<str>,
}

/// On-disk representation of a built-in model.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    kind: ClassifierKind,
    classes: usize,
    dim: usize,
    network: Network,
}

impl ClassifierHandle {
    pub fn from_network(network: Network) -> Self {
        let digest = Sha256::digest(serde_json::to_vec(&network).expect("network serializes"));
        let id = format!("network:{}", &hex::encode(digest)[..16]);
        ClassifierHandle {
            backend: Arc::new(Backend::Network(network)),
            batch_limit: DEFAULT_BATCH_LIMIT,
            id: id.into(),
        }
    }

    pub fn from_external(external: ExternalClassifier, batch_limit: usize) -> Self {
        let id = format!("external:{}", external.endpoint());
        ClassifierHandle {
            backend: Arc::new(Backend::External(external)),
            batch_limit: batch_limit.max(1),
            id: id.into(),
        }
    }

    pub fn with_batch_limit(mut self, batch_limit: usize) -> Self {
        self.batch_limit = batch_limit.max(1);
        self
    }

    pub fn kind(&self) -> ClassifierKind {
        match &*self.backend {
            Backend::Network(n) if n.is_linear() => ClassifierKind::SoftmaxLinear,
            Backend::Network(_) => ClassifierKind::Mlp,
            Backend::External(_) => ClassifierKind::External,
        }
    }

    pub fn class_count(&self) -> usize {
        match &*self.backend {
            Backend::Network(n) => n.class_count(),
            Backend::External(e) => e.class_count(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &*self.backend {
            Backend::Network(n) => n.input_dim(),
            Backend::External(e) => e.input_dim(),
        }
    }

    pub fn batch_limit(&self) -> usize {
        self.batch_limit
    }

    /// Stable identifier: a parameter digest for built-in models, the
    /// endpoint for external ones.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn network(&self) -> Option<&Network> {
        match &*self.backend {
            Backend::Network(n) => Some(n),
            Backend::External(_) => None,
        }
    }

    /// Row-stochastic `m × C` matrix of class probabilities. Built-in models
    /// evaluate each row independently, so results do not depend on how
    /// points are grouped into batches.
    pub fn predict_batch(&self, points: &Matrix) -> Result<Matrix> {
        if points.cols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: points.cols(),
            });
        }
        if !points.is_finite() {
            return Err(Error::param("prediction inputs must be finite"));
        }
        match &*self.backend {
            Backend::Network(net) => {
                let mut out = Matrix::zeros(points.rows(), net.class_count());
                for (i, x) in points.iter_rows().enumerate() {
                    net.predict_into(x, out.row_mut(i));
                }
                Ok(out)
            }
            Backend::External(ext) => {
                let mut out = Matrix::zeros(points.rows(), ext.class_count());
                let mut start = 0;
                while start < points.rows() {
                    let end = (start + self.batch_limit).min(points.rows());
                    let idx: Vec<usize> = (start..end).collect();
                    let probs = ext.predict_chunk(&points.select_rows(&idx))?;
                    for (k, i) in (start..end).enumerate() {
                        out.row_mut(i).copy_from_slice(probs.row(k));
                    }
                    start = end;
                }
                Ok(out)
            }
        }
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&m)?.row(0).to_vec())
    }

    /// Gradient of the cross-entropy `-ln f(x)_label` with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], true_label: usize) -> Result<Vec<f64>> {
        let net = self
            .network()
            .ok_or_else(|| Error::Unsupported("input gradients need a built-in classifier".into()))?;
        if x.len() != net.input_dim() {
            return Err(Error::Dimension {
                expected: net.input_dim(),
                actual: x.len(),
            });
        }
        if true_label >= net.class_count() {
            return Err(Error::param(format!("label {true_label} out of range")));
        }
        Ok(net.input_gradient(x, true_label))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let net = self
            .network()
            .ok_or_else(|| Error::Unsupported("external classifiers cannot be saved".into()))?;
        let file = ModelFile {
            kind: self.kind(),
            classes: net.class_count(),
            dim: net.input_dim(),
            network: net.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let network = Network::new(file.network.layers().to_vec())?;
        if network.class_count() != file.classes || network.input_dim() != file.dim {
            return Err(Error::Data("model header disagrees with its layers".into()));
        }
        Ok(ClassifierHandle::from_network(network))
    }
}

/// Multinomial logistic regression; `epochs = 0` leaves the uniform zero model.
pub fn train_softmax(data: &Dataset, epochs: usize, learning_rate: f64) -> Result<ClassifierHandle> {
    let (net, _) = train_softmax_network(data, epochs, learning_rate)?;
    Ok(ClassifierHandle::from_network(net))
}

pub fn train_mlp(
    data: &Dataset,
    hidden_sizes: &[usize],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ClassifierHandle> {
    let (net, _) = train_mlp_network(data, hidden_sizes, epochs, learning_rate, seed)?;
    Ok(ClassifierHandle::from_network(net))
}

/// Connects to an external classifier and verifies its declared class count.
pub fn external_connect(
    command_or_url: &str,
    class_count: usize,
    batch_limit: usize,
) -> Result<ClassifierHandle> {
    let ext = ExternalClassifier::connect(command_or_url, class_count)?;
    Ok(ClassifierHandle::from_external(ext, batch_limit))
}

/// Fast gradient sign step `x + ε·sign(∇ₓ L)`. Zero gradient components
/// leave the coordinate unchanged, and every coordinate stays within `ε`
/// of `x` in floating point.
pub fn fgsm(handle: &ClassifierHandle, x: &[f64], true_label: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon must be finite and >= 0"));
    }
    let grad = handle.input_gradient(x, true_label)?;
    Ok(x.iter()
        .zip(&grad)
        .map(|(&xi, &g)| {
            let sign = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut moved = xi + epsilon * sign;
            while (moved - xi).abs() > epsilon {
                moved = if moved > xi { moved.next_down() } else { moved.next_up() };
            }
            moved
        })
        .collect())
}
