//! Discriminative distances: the arc length of `√D_JS` pulled back through
//! a classifier along the straight segment between two inputs, plus a
//! `λ`-weighted Euclidean regularizer.
//!
//! Every divergence here clamps its inputs to `[1e-12, 1]` and renormalizes
//! before taking logarithms. Natural logarithms throughout, so
//! `0 ≤ D_JS ≤ ln 2`.
//!
//! Divergences are evaluated in the form `Σ m·h(t)` with
//! `h(t) = (1+t)·ln(1+t) − t ≥ 0`, which keeps every summand nonnegative and
//! avoids the cancellation of `Σ p·ln(p/m)` between nearby distributions.
//! That matters because path segments are short and the square root
//! amplifies absolute error near zero.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

pub const PROB_FLOOR: f64 = 1e-12;

/// Clamps into `[1e-12, 1]` and renormalizes to sum one.
pub fn clamp_probs(p: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|&v| v.clamp(PROB_FLOOR, 1.0)).collect();
    let sum: f64 = out.iter().sum();
    if sum != 1.0 {
        out.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

#[inline]
fn h(t: f64) -> f64 {
    if t <= -1.0 {
        1.0
    } else {
        (1.0 + t) * t.ln_1p() - t
    }
}

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(())
}

/// `D_KL(p‖q) = Σ p_c ln(p_c / q_c)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let (p, q) = (clamp_probs(p), clamp_probs(q));
    Ok(p.iter()
        .zip(&q)
        .map(|(&pc, &qc)| qc * h((pc - qc) / qc))
        .sum())
}

/// Jensen–Shannon divergence `½ D_KL(p‖m) + ½ D_KL(q‖m)`, `m = (p+q)/2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(js_clamped(&clamp_probs(p), &clamp_probs(q)))
}

fn js_clamped(p: &[f64], q: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&pc, &qc)| {
            let s = pc + qc;
            let t = (pc - qc) / s;
            0.5 * s * (h(t) + h(-t))
        })
        .sum();
    // Σ m·(h(t)+h(−t)) / 2 with m = s/2
    0.5 * total
}

/// `√D_JS`, a metric on the probability simplex with values in `[0, √ln 2]`.
pub fn js_sqrt_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(js_divergence(p, q)?.sqrt())
}

/// `√(½ D_KL(p‖q) + ½ D_KL(q‖p))`.
pub fn sym_kl_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let (p, q) = (clamp_probs(p), clamp_probs(q));
    let total: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pc, &qc)| qc * h((pc - qc) / qc) + pc * h((qc - pc) / pc))
        .sum();
    Ok((0.5 * total).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    SqrtJs,
    SymKl,
}

impl Divergence {
    fn distance_clamped(self, p: &[f64], q: &[f64]) -> f64 {
        match self {
            Divergence::SqrtJs => js_clamped(p, q).sqrt(),
            Divergence::SymKl => sym_kl_distance(p, q).expect("equal lengths"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMetric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FisherMetricConfig {
    pub lambda: f64,
    pub n_segments: usize,
    pub base_metric: BaseMetric,
    pub divergence: Divergence,
}

impl Default for FisherMetricConfig {
    fn default() -> Self {
        FisherMetricConfig {
            lambda: 0.1,
            n_segments: 8,
            base_metric: BaseMetric::Euclidean,
            divergence: Divergence::SqrtJs,
        }
    }
}

impl FisherMetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda must be finite and >= 0"));
        }
        if self.n_segments < 1 {
            return Err(Error::param("n_segments must be >= 1"));
        }
        Ok(())
    }
}

/// Discretized path length split into its divergence and regularizer parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcLength {
    pub divergence: f64,
    pub regularizer: f64,
}

impl ArcLength {
    pub fn total(&self) -> f64 {
        self.divergence + self.regularizer
    }
}

/// The `n + 1` points `x + (i/n)(y − x)`, `i = 0..=n`, as rows.
pub fn segment_points(x: &[f64], y: &[f64], n: usize) -> Matrix {
    let mut m = Matrix::zeros(n + 1, x.len());
    for i in 0..=n {
        let t = i as f64 / n as f64;
        for (d, v) in m.row_mut(i).iter_mut().enumerate() {
            *v = x[d] + t * (y[d] - x[d]);
        }
    }
    m
}

fn arc_from_probs(probs: &[Vec<f64>], x: &[f64], y: &[f64], config: &FisherMetricConfig) -> ArcLength {
    let divergence = probs
        .windows(2)
        .map(|w| config.divergence.distance_clamped(&w[0], &w[1]))
        .sum();
    // the regularizer is additive along a straight path
    ArcLength {
        divergence,
        regularizer: config.lambda * euclidean(x, y),
    }
}

fn clamped_rows(probs: &Matrix, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    range.map(|r| clamp_probs(probs.row(r))).collect()
}

/// Path length between `x` and `y`, split into its two parts. All `n + 1`
/// classifier evaluations go out as one batch.
pub fn fisher_arc(
    x: &[f64],
    y: &[f64],
    f: &ClassifierHandle,
    config: &FisherMetricConfig,
) -> Result<ArcLength> {
    config.validate()?;
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let pts = segment_points(x, y, config.n_segments);
    let probs = f.predict_batch(&pts)?;
    Ok(arc_from_probs(&clamped_rows(&probs, 0..pts.rows()), x, y, config))
}

/// `Σᵢ [ d(f(pᵢ₋₁), f(pᵢ)) + λ‖pᵢ₋₁ − pᵢ‖ ]` along the straight segment.
pub fn fisher_distance(
    x: &[f64],
    y: &[f64],
    f: &ClassifierHandle,
    config: &FisherMetricConfig,
) -> Result<f64> {
    Ok(fisher_arc(x, y, f, config)?.total())
}

/// Symmetric matrix of pairwise distances with the settings and classifier that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Matrix,
    config: FisherMetricConfig,
    classifier_id: String,
}

#[derive(Serialize, Deserialize)]
struct DistanceMatrixFile {
    n: usize,
    config: FisherMetricConfig,
    classifier_id: String,
    /// Strict lower triangle, row by row: (1,0), (2,0), (2,1), …
    values_lower_triangle: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps a precomputed matrix after checking symmetry, zero diagonal
    /// and nonnegativity.
    pub fn from_values(values: Matrix, config: FisherMetricConfig, classifier_id: impl Into<String>) -> Result<Self> {
        let n = values.rows();
        if values.cols() != n {
            return Err(Error::Dimension {
                expected: n,
                actual: values.cols(),
            });
        }
        for i in 0..n {
            if values.get(i, i) != 0.0 {
                return Err(Error::Data("distance matrix diagonal must be zero".into()));
            }
            for j in 0..i {
                let (a, b) = (values.get(i, j), values.get(j, i));
                if !(a.is_finite() && a >= 0.0) || (a - b).abs() > 1e-9 {
                    return Err(Error::Data(format!("invalid distance entry ({i},{j})")));
                }
            }
        }
        Ok(DistanceMatrix {
            values,
            config,
            classifier_id: classifier_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn config(&self) -> &FisherMetricConfig {
        &self.config
    }

    pub fn classifier_id(&self) -> &str {
        &self.classifier_id
    }

    /// Restriction to a subset of points, in the given order.
    pub fn subset(&self, indices: &[usize]) -> DistanceMatrix {
        let mut values = Matrix::zeros(indices.len(), indices.len());
        for (a, &i) in indices.iter().enumerate() {
            for (b, &j) in indices.iter().enumerate() {
                values.set(a, b, self.values.get(i, j));
            }
        }
        DistanceMatrix {
            values,
            config: self.config,
            classifier_id: self.classifier_id.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let n = self.len();
        let mut lower = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            lower.extend_from_slice(&self.values.row(i)[..i]);
        }
        Ok(serde_json::to_string(&DistanceMatrixFile {
            n,
            config: self.config,
            classifier_id: self.classifier_id.clone(),
            values_lower_triangle: lower,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DistanceMatrixFile = serde_json::from_str(text)?;
        let n = file.n;
        if file.values_lower_triangle.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::Data("lower triangle has the wrong length".into()));
        }
        let mut values = Matrix::zeros(n, n);
        let mut it = file.values_lower_triangle.into_iter();
        for i in 0..n {
            for j in 0..i {
                let v = it.next().expect("length checked");
                values.set(i, j, v);
                values.set(j, i, v);
            }
        }
        DistanceMatrix::from_values(values, file.config, file.classifier_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Progress sink: `(pairs_done, pairs_total)`.
pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

/// Runs `op` on a pool of `parallelism` threads (`0` = rayon default).
pub(crate) fn with_pool<T: Send>(parallelism: usize, op: impl FnOnce() -> T + Send) -> Result<T> {
    if parallelism == 0 {
        return Ok(op());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    Ok(pool.install(op))
}

/// All pairwise `fisher_distance` values. Each unordered pair is computed
/// once (path from the lower to the higher index) and mirrored. Segment
/// points of several pairs share one `predict_batch` call up to the
/// classifier's batch limit; the result does not depend on `parallelism`.
pub fn distance_matrix(
    data: &Dataset,
    f: &ClassifierHandle,
    config: &FisherMetricConfig,
    parallelism: usize,
    progress: Option<Progress<'_>>,
) -> Result<DistanceMatrix> {
    config.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::param("distance matrix needs at least two points"));
    }
    if data.dim() != f.input_dim() {
        return Err(Error::Dimension {
            expected: f.input_dim(),
            actual: data.dim(),
        });
    }
    let pts = data.points();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let per_pair = config.n_segments + 1;
    let pairs_per_chunk = (f.batch_limit() / per_pair).max(1);
    let total = pairs.len();
    let done = AtomicUsize::new(0);

    let chunk_results: Vec<Result<Vec<f64>>> = with_pool(parallelism, || {
        pairs
            .par_chunks(pairs_per_chunk)
            .map(|chunk| {
                let mut batch = Vec::with_capacity(chunk.len() * per_pair * data.dim());
                for &(i, j) in chunk {
                    batch.extend_from_slice(
                        segment_points(pts.row(i), pts.row(j), config.n_segments).as_slice(),
                    );
                }
                let batch = Matrix::from_vec(chunk.len() * per_pair, data.dim(), batch)?;
                let probs = f.predict_batch(&batch)?;
                let out = chunk
                    .iter()
                    .enumerate()
                    .map(|(k, &(i, j))| {
                        let rows = clamped_rows(&probs, k * per_pair..(k + 1) * per_pair);
                        arc_from_probs(&rows, pts.row(i), pts.row(j), config).total()
                    })
                    .collect();
                let finished = done.fetch_add(chunk.len(), Ordering::Relaxed) + chunk.len();
                if let Some(cb) = progress {
                    cb(finished, total);
                }
                Ok(out)
            })
            .collect()
    })?;

    let mut values = Matrix::zeros(n, n);
    let mut it = pairs.iter();
    for chunk in chunk_results {
        for v in chunk? {
            let &(i, j) = it.next().expect("one value per pair");
            values.set(i, j, v);
            values.set(j, i, v);
        }
    }
    Ok(DistanceMatrix {
        values,
        config: *config,
        classifier_id: f.id().to_owned(),
    })
}

/// Plain Euclidean pairwise distances (the classifier-agnostic baseline).
pub fn euclidean_distance_matrix(data: &Dataset) -> DistanceMatrix {
    let n = data.len();
    let pts = data.points();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(pts.row(i), pts.row(j));
            values.set(i, j, d);
            values.set(j, i, d);
        }
    }
    DistanceMatrix {
        values,
        config: FisherMetricConfig {
            lambda: 1.0,
            n_segments: 1,
            ..Default::default()
        },
        classifier_id: "euclidean".into(),
    }
}
