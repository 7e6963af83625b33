//! Inverse projection from the plane back into input space.
//!
//! `π⁻¹(y) = Θ u(y)` where `u(y)` normalizes the kernel weights
//! `w_i(y)/σ̂_i`, `w_i(y) = (1 + a‖y − ρ̂_i‖^{2b})⁻¹`, so every output is a
//! convex combination of the anchor columns `θ_i`. Training fits `Θ` to
//! pairs `(s_i, r_i)` by gradient descent with an exact line search,
//! momentum and a Euclidean warm-up.

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierHandle, ClassifierKind};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fisher_metric::js_sqrt_distance;
use crate::matrix::{dot, sq_dist, Matrix};

/// Anchors, kernel widths and `Θ` (`D × n`, one column per anchor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseMapModel {
    #[serde(rename = "anchors2d")]
    anchors: Matrix,
    theta: Matrix,
    #[serde(rename = "sigma")]
    sigma_hat: Vec<f64>,
    a: f64,
    b: f64,
}

impl InverseMapModel {
    pub fn new(anchors: Matrix, theta: Matrix, sigma_hat: Vec<f64>, a: f64, b: f64) -> Result<Self> {
        let n = anchors.rows();
        if n == 0 || anchors.cols() != 2 {
            return Err(Error::param("anchors must be a non-empty n × 2 matrix"));
        }
        if theta.cols() != n || sigma_hat.len() != n {
            return Err(Error::Dimension {
                expected: n,
                actual: theta.cols().min(sigma_hat.len()),
            });
        }
        if !theta.is_finite() || !anchors.is_finite() {
            return Err(Error::param("anchors and theta must be finite"));
        }
        if sigma_hat.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::param("kernel widths must be positive"));
        }
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::param("a and b must be positive"));
        }
        Ok(InverseMapModel {
            anchors,
            theta,
            sigma_hat,
            a,
            b,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.theta.rows()
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn sigma_hat(&self) -> &[f64] {
        &self.sigma_hat
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Normalized weights `u(y)` restricted to `subset` (all anchors if `None`).
    pub fn weights_over(&self, y: [f64; 2], subset: Option<&[usize]>) -> Vec<f64> {
        let idx: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..self.len()).collect(),
        };
        let log_w = |i: usize| {
            let r = self.anchors.row(i);
            let log_aq = self.a.ln() + 2.0 * self.b * (y[0] - r[0]).hypot(y[1] - r[1]).ln();
            let log_kernel = if log_aq > 36.0 { log_aq } else { log_aq.exp().ln_1p() };
            -log_kernel - self.sigma_hat[i].ln()
        };
        let mut u: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let q = sq_dist(&y, self.anchors.row(i));
                1.0 / ((1.0 + self.a * q.powf(self.b)) * self.sigma_hat[i])
            })
            .collect();
        let max = u.iter().copied().fold(0.0, f64::max);
        if max.is_nan() || max < 1e-300 || u.iter().any(|v| !v.is_finite()) {
            // far from every anchor: normalize in log space
            let logs: Vec<f64> = idx.iter().map(|&i| log_w(i)).collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            u = if top.is_finite() {
                logs.iter().map(|l| (l - top).exp()).collect()
            } else {
                vec![1.0; idx.len()]
            };
        }
        let sum: f64 = u.iter().sum();
        u.iter_mut().for_each(|v| *v /= sum);
        u
    }

    pub fn weights(&self, y: [f64; 2]) -> Vec<f64> {
        self.weights_over(y, None)
    }

    /// `Θ u(y)`.
    pub fn evaluate(&self, y: [f64; 2]) -> Vec<f64> {
        let u = self.weights(y);
        (0..self.dim()).map(|d| dot(self.theta.row(d), &u)).collect()
    }

    /// Evaluation using only the anchors in `subset`.
    pub fn evaluate_subset(&self, y: [f64; 2], subset: &[usize]) -> Vec<f64> {
        let u = self.weights_over(y, Some(subset));
        (0..self.dim())
            .map(|d| {
                let row = self.theta.row(d);
                subset.iter().zip(&u).map(|(&i, &w)| row[i] * w).sum()
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: InverseMapModel = serde_json::from_str(text)?;
        InverseMapModel::new(m.anchors, m.theta, m.sigma_hat, m.a, m.b)
    }
}

/// Locally constant SPD metric `A_i` around a sample.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalMetric {
    Identity,
    Diagonal(Vec<f64>),
    Dense(Matrix),
}

impl LocalMetric {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            LocalMetric::Identity => v.to_vec(),
            LocalMetric::Diagonal(d) => v.iter().zip(d).map(|(x, a)| x * a).collect(),
            LocalMetric::Dense(m) => m.iter_rows().map(|row| dot(row, v)).collect(),
        }
    }

    /// `vᵀ A v`.
    pub fn quad(&self, v: &[f64]) -> f64 {
        dot(v, &self.apply(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    #[default]
    Identity,
    FisherDiag,
}

/// Maximum input dimension for which `fisher_diag` probes an external
/// classifier (two forward passes per coordinate per point).
pub const EXTERNAL_FISHER_DIAG_MAX_DIM: usize = 64;

/// Local metrics per sample. `fisher_diag` uses the squared central
/// difference quotient of `√D_JS` along each axis (`h = 1e-3`), clamped to
/// `[1e-6, 1e6]`.
pub fn local_metrics(data: &Dataset, f: &ClassifierHandle, mode: MetricMode) -> Result<Vec<LocalMetric>> {
    match mode {
        MetricMode::Identity => Ok(vec![LocalMetric::Identity; data.len()]),
        MetricMode::FisherDiag => {
            let dim = data.dim();
            if f.kind() == ClassifierKind::External && dim > EXTERNAL_FISHER_DIAG_MAX_DIM {
                return Err(Error::Unsupported(format!(
                    "fisher_diag on an external classifier needs D <= {EXTERNAL_FISHER_DIAG_MAX_DIM}"
                )));
            }
            const H: f64 = 1e-3;
            let mut out = Vec::with_capacity(data.len());
            for x in data.points().iter_rows() {
                let mut probes = Matrix::zeros(2 * dim, dim);
                for d in 0..dim {
                    probes.row_mut(2 * d).copy_from_slice(x);
                    probes.row_mut(2 * d + 1).copy_from_slice(x);
                    probes.set(2 * d, d, x[d] - H);
                    probes.set(2 * d + 1, d, x[d] + H);
                }
                let p = f.predict_batch(&probes)?;
                let diag = (0..dim)
                    .map(|d| {
                        let slope = js_sqrt_distance(p.row(2 * d), p.row(2 * d + 1))? / (2.0 * H);
                        Ok((slope * slope).clamp(1e-6, 1e6))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                out.push(LocalMetric::Diagonal(diag));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseParams {
    /// Kernel `a`; `None` fits it from `(min_dist, spread)` with `b = 1`.
    pub a: Option<f64>,
    pub b: f64,
    pub momentum: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    /// Stop once `‖J‖_F < tol_factor · initial loss`.
    pub tol_factor: f64,
    pub metric: MetricMode,
    pub sigma: SigmaSource,
}

impl Default for InverseParams {
    fn default() -> Self {
        InverseParams {
            a: None,
            b: 1.0,
            momentum: 0.9,
            warmup_iters: 10,
            max_iters: 200,
            tol_factor: 1e-8,
            metric: MetricMode::Identity,
            sigma: SigmaSource::Perplexity,
        }
    }
}

impl InverseParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.a {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::param("a must be positive"));
            }
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::param("b must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How kernel widths `σ̂_i` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    /// Input-space `σ_i` rescaled into squared embedding units.
    #[default]
    Perplexity,
    /// `(median pairwise 2D distance)²` for every anchor.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub iterations: usize,
    pub loss_trace: Vec<f64>,
    pub warmup_iterations: usize,
    pub momentum: f64,
}

/// Settings for [`train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub a: f64,
    pub b: f64,
    pub momentum: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    pub tol_factor: f64,
}

/// Row `i` holds the normalized weight vector `w(r_i)` over all anchors.
fn weight_rows(model: &InverseMapModel, anchors: &Matrix) -> Vec<Vec<f64>> {
    anchors
        .iter_rows()
        .map(|r| model.weights([r[0], r[1]]))
        .collect()
}

fn predict_with(theta: &Matrix, w: &[f64]) -> Vec<f64> {
    (0..theta.rows()).map(|d| dot(theta.row(d), w)).collect()
}

fn residuals(theta: &Matrix, weights: &[Vec<f64>], targets: &Matrix) -> Vec<Vec<f64>> {
    weights
        .iter()
        .zip(targets.iter_rows())
        .map(|(w, s)| {
            let mut r = predict_with(theta, w);
            r.iter_mut().zip(s).for_each(|(x, t)| *x -= t);
            r
        })
        .collect()
}

/// `Σ (Θ w_i − s_i)ᵀ A_i (Θ w_i − s_i)`.
pub fn weighted_loss(theta: &Matrix, weights: &[Vec<f64>], targets: &Matrix, metrics: &[LocalMetric]) -> f64 {
    residuals(theta, weights, targets)
        .iter()
        .zip(metrics)
        .map(|(r, a)| a.quad(r))
        .sum()
}

/// `J(Θ) = Σ A_i (Θ w_i − s_i) w_iᵀ`, a `D × n` matrix. This is half the
/// gradient of [`weighted_loss`]; the line search absorbs the factor.
pub fn loss_gradient(theta: &Matrix, weights: &[Vec<f64>], targets: &Matrix, metrics: &[LocalMetric]) -> Matrix {
    let mut j = Matrix::zeros(theta.rows(), theta.cols());
    for ((r, w), a) in residuals(theta, weights, targets).iter().zip(weights).zip(metrics) {
        let ar = a.apply(r);
        for (d, &ard) in ar.iter().enumerate() {
            for (dst, &wk) in j.row_mut(d).iter_mut().zip(w) {
                *dst += ard * wk;
            }
        }
    }
    j
}

/// Exact minimizer over `η` of the loss at `Θ − η J`:
/// `Σ (Θ w_i − s_i)ᵀ A_i J w_i / Σ (J w_i)ᵀ A_i J w_i`, or `0` when the
/// denominator is at most `1e-18`.
pub fn optimal_learning_rate(
    theta: &Matrix,
    direction: &Matrix,
    weights: &[Vec<f64>],
    targets: &Matrix,
    metrics: &[LocalMetric],
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((r, w), a) in residuals(theta, weights, targets).iter().zip(weights).zip(metrics) {
        let jw = predict_with(direction, w);
        let ajw = a.apply(&jw);
        num += dot(r, &ajw);
        den += dot(&jw, &ajw);
    }
    if den <= 1e-18 {
        0.0
    } else {
        num / den
    }
}

/// Trains `Θ` from `Θ₀ = (s_1, …, s_n)` on pairs `(targets_i, anchors_i)`.
pub fn train(
    targets: &Matrix,
    anchors: &Matrix,
    sigma_hat: &[f64],
    metrics: &[LocalMetric],
    settings: &TrainSettings,
) -> Result<(InverseMapModel, TrainingReport)> {
    train_from(targets.transpose(), targets, anchors, sigma_hat, metrics, settings)
}

/// As [`train`] but starting from an arbitrary `Θ₀` (`D × n`).
pub fn train_from(
    theta0: Matrix,
    targets: &Matrix,
    anchors: &Matrix,
    sigma_hat: &[f64],
    metrics: &[LocalMetric],
    settings: &TrainSettings,
) -> Result<(InverseMapModel, TrainingReport)> {
    let n = targets.rows();
    if anchors.rows() != n || metrics.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: anchors.rows().min(metrics.len()),
        });
    }
    if !(0.0..1.0).contains(&settings.momentum) {
        return Err(Error::param("momentum must lie in [0, 1)"));
    }
    let mut model = InverseMapModel::new(anchors.clone(), theta0, sigma_hat.to_vec(), settings.a, settings.b)?;
    if model.dim() != targets.cols() {
        return Err(Error::Dimension {
            expected: targets.cols(),
            actual: model.dim(),
        });
    }
    let weights = weight_rows(&model, anchors);
    let euclid = vec![LocalMetric::Identity; n];
    let metrics_at = |iter: usize| if iter < settings.warmup_iters { &euclid[..] } else { metrics };

    let initial = weighted_loss(&model.theta, &weights, targets, metrics_at(0));
    let tol = settings.tol_factor * initial;
    let mut trace = vec![initial];
    let mut velocity = Matrix::zeros(model.theta.rows(), n);
    let mut iterations = 0;
    for iter in 0..settings.max_iters {
        let a_i = metrics_at(iter);
        let grad = loss_gradient(&model.theta, &weights, targets, a_i);
        if grad.frobenius_norm() <= tol {
            break;
        }
        if iter == settings.warmup_iters {
            // metric switch invalidates the accumulated direction
            velocity = Matrix::zeros(model.theta.rows(), n);
        }
        for (v, g) in velocity.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *v = g + settings.momentum * *v;
        }
        let eta = optimal_learning_rate(&model.theta, &velocity, &weights, targets, a_i);
        for (t, v) in model.theta.as_mut_slice().iter_mut().zip(velocity.as_slice()) {
            *t -= eta * v;
        }
        let loss = weighted_loss(&model.theta, &weights, targets, metrics_at(iter + 1));
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at iteration {iter}")));
        }
        trace.push(loss);
        iterations = iter + 1;
    }
    Ok((
        model,
        TrainingReport {
            iterations,
            loss_trace: trace,
            warmup_iterations: settings.warmup_iters.min(iterations),
            momentum: settings.momentum,
        },
    ))
}

/// Kernel widths from the input-space calibration: `σ_i` is rescaled by
/// the squared ratio of mean 2D to mean input distance over the point's
/// neighbors, then clamped to `[0.1, 10] ×` the median.
pub fn perplexity_sigma_hat(
    sigma: &[f64],
    neighbors: &[Vec<usize>],
    input_dist: impl Fn(usize, usize) -> f64,
    coords: &Matrix,
) -> Vec<f64> {
    let raw: Vec<f64> = sigma
        .iter()
        .zip(neighbors)
        .enumerate()
        .map(|(i, (&s, nn))| {
            let (mut in_sum, mut out_sum) = (0.0, 0.0);
            for &j in nn {
                in_sum += input_dist(i, j);
                out_sum += sq_dist(coords.row(i), coords.row(j)).sqrt();
            }
            if in_sum > 0.0 && out_sum > 0.0 {
                s * (out_sum / in_sum).powi(2)
            } else {
                f64::NAN
            }
        })
        .collect();
    let mut valid: Vec<f64> = raw.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    if valid.is_empty() {
        return constant_sigma_hat(coords);
    }
    let med = median(&mut valid);
    raw.iter()
        .map(|&v| if v.is_finite() && v > 0.0 { v.clamp(0.1 * med, 10.0 * med) } else { med })
        .collect()
}

/// `(median pairwise 2D distance)²` for every anchor (`1` if degenerate).
pub fn constant_sigma_hat(coords: &Matrix) -> Vec<f64> {
    let n = coords.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(coords.row(i), coords.row(j)).sqrt());
        }
    }
    let med = if d.is_empty() { 1.0 } else { median(&mut d) };
    let s = if med > 0.0 { med * med } else { 1.0 };
    vec![s; n]
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
