//! End-to-end decision map: distances, embedding, inverse map, grid,
//! classification and entropy.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::dataset::Dataset;
use crate::delaunay::{self, DelaunayParams, LocalInverse, Locator};
use crate::embedding::{self, EmbeddingModel, UmapParams};
use crate::error::{Error, Result};
use crate::evaluation::{self, QualityReport};
use crate::fisher_metric::{self, with_pool, DistanceMatrix, FisherMetricConfig};
use crate::inverse_map::{self, InverseMapModel, InverseParams, SigmaSource, TrainSettings, TrainingReport};
use crate::matrix::{argmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    /// Viewport margin per side as a fraction of the data extent.
    pub margin_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            width: 100,
            height: 100,
            margin_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub k: usize,
    pub split_fraction: f64,
    pub seed: u64,
    /// Also embed with plain Euclidean distances and report its kNN score.
    pub euclidean_baseline: bool,
    /// Score the kNN accuracy against dataset labels instead of predictions.
    pub ground_truth_labels: bool,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            k: evaluation::DEFAULT_K,
            split_fraction: evaluation::DEFAULT_SPLIT,
            seed: 0,
            euclidean_baseline: false,
            ground_truth_labels: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub metric: FisherMetricConfig,
    pub umap: UmapParams,
    pub inverse: InverseParams,
    pub grid: GridConfig,
    pub accel: Option<DelaunayParams>,
    pub quality: QualityConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        self.umap.validate()?;
        self.inverse.validate()?;
        if self.grid.width == 0 || self.grid.height == 0 {
            return Err(Error::param("grid must have at least one cell"));
        }
        if !(self.grid.margin_fraction >= 0.0 && self.grid.margin_fraction.is_finite()) {
            return Err(Error::param("margin fraction must be non-negative"));
        }
        if let Some(acc) = &self.accel {
            if acc.n_k == 0 || acc.epsilon_fraction.is_nan() || acc.epsilon_fraction <= 0.0 {
                return Err(Error::param("accel needs n_k >= 1 and a positive epsilon"));
            }
        }
        if self.quality.k == 0 {
            return Err(Error::param("quality k must be positive"));
        }
        if !(self.quality.split_fraction > 0.0 && self.quality.split_fraction < 1.0) {
            return Err(Error::param("split fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Applies a JSON merge patch and validates the result.
    pub fn merged(&self, patch: &serde_json::Value) -> Result<PipelineConfig> {
        let mut base = serde_json::to_value(self)?;
        merge_patch(&mut base, patch);
        let cfg: PipelineConfig = serde_json::from_value(base).map_err(|e| Error::param(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge_patch(target: &mut serde_json::Value, patch: &serde_json::Value) {
    use serde_json::Value;
    match patch {
        Value::Object(p) => {
            if !target.is_object() {
                *target = Value::Object(Default::default());
            }
            let t = target.as_object_mut().expect("object");
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        other => *target = other.clone(),
    }
}

/// One scatter entry: `[x, y, model_label, true_label]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint(pub f64, pub f64, pub usize, pub Option<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionMap {
    /// `[xmin, xmax, ymin, ymax]` in embedding units.
    pub viewport: [f64; 4],
    /// `[width, height]` in cells.
    pub resolution: [usize; 2],
    pub classes: usize,
    /// `height` rows (increasing y) of `width` labels.
    pub grid_labels: Vec<Vec<usize>>,
    pub grid_entropy: Vec<Vec<f64>>,
    pub scatter: Vec<ScatterPoint>,
    pub quality: QualityReport,
    pub params: PipelineConfig,
    pub classifier_id: String,
}

impl DecisionMap {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Center of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        cell_center(self.viewport, self.resolution, col, row)
    }
}

fn cell_center(viewport: [f64; 4], resolution: [usize; 2], col: usize, row: usize) -> [f64; 2] {
    let [x0, x1, y0, y1] = viewport;
    let [w, h] = resolution;
    [
        x0 + (col as f64 + 0.5) * (x1 - x0) / w as f64,
        y0 + (row as f64 + 0.5) * (y1 - y0) / h as f64,
    ]
}

/// Trained inverse projection, optionally restricted to Delaunay
/// neighborhoods.
#[derive(Debug, Clone)]
pub enum Inverse {
    Global(InverseMapModel),
    Local(Box<LocalInverse>),
}

impl Inverse {
    pub fn model(&self) -> &InverseMapModel {
        match self {
            Inverse::Global(m) => m,
            Inverse::Local(l) => l.model(),
        }
    }

    pub fn evaluate(&self, y: [f64; 2]) -> Vec<f64> {
        match self {
            Inverse::Global(m) => m.evaluate(y),
            Inverse::Local(l) => l.evaluate(y),
        }
    }

    fn evaluate_row(&self, ys: &[[f64; 2]]) -> Vec<Vec<f64>> {
        match self {
            Inverse::Global(m) => ys.iter().map(|&y| m.evaluate(y)).collect(),
            Inverse::Local(l) => {
                let loc = Locator::new(l.triangulation());
                ys.iter().map(|&y| l.evaluate_with(&loc, y)).collect()
            }
        }
    }
}

/// Result of inverse-projecting and classifying one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub probs: Vec<f64>,
    pub label: usize,
    pub entropy: f64,
}

/// `−Σ p ln p`, clamped to `[0, ln C]`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.clamp(0.0, (p.len() as f64).ln())
}

fn classify_rows(f: &ClassifierHandle, xs: Vec<Vec<f64>>) -> Result<Vec<Probe>> {
    let probs = f.predict_batch(&Matrix::from_rows(&xs)?)?;
    Ok(xs
        .into_iter()
        .zip(probs.iter_rows())
        .map(|(x, p)| Probe {
            x,
            probs: p.to_vec(),
            label: argmax(p),
            entropy: entropy(p),
        })
        .collect())
}

/// Inverse-projects `y` and classifies the result with the same code path
/// used for the map grid.
pub fn probe(inverse: &Inverse, f: &ClassifierHandle, y: [f64; 2]) -> Result<Probe> {
    if !(y[0].is_finite() && y[1].is_finite()) {
        return Err(Error::param("probe position must be finite"));
    }
    let mut out = classify_rows(f, inverse.evaluate_row(&[y]))?;
    Ok(out.pop().expect("one row"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Distances,
    Embedding,
    Inverse,
    Grid,
    Quality,
}

/// Progress sink: `(stage, fraction of that stage done)`.
pub type StageProgress<'a> = &'a (dyn Fn(Stage, f64) + Sync);

#[derive(Default, Clone, Copy)]
pub struct RunOptions<'a> {
    /// Worker threads; `0` uses the global pool. Results do not depend on it.
    pub parallelism: usize,
    /// Distance-matrix cache, reused when it matches the classifier,
    /// metric and point count.
    pub cache: Option<&'a Path>,
    pub progress: Option<StageProgress<'a>>,
}

pub struct PipelineOutput {
    pub map: DecisionMap,
    pub inverse: Inverse,
    pub embedding: EmbeddingModel,
    pub distances: DistanceMatrix,
    pub sigma_hat: Vec<f64>,
    pub training: TrainingReport,
}

fn report(progress: Option<StageProgress<'_>>, stage: Stage, fraction: f64) {
    if let Some(cb) = progress {
        cb(stage, fraction);
    }
}

fn cached_distances(
    data: &Dataset,
    f: &ClassifierHandle,
    config: &FisherMetricConfig,
    opts: &RunOptions<'_>,
) -> Result<DistanceMatrix> {
    if let Some(path) = opts.cache {
        if path.exists() {
            match DistanceMatrix::load(path) {
                Ok(d) if d.len() == data.len() && d.classifier_id() == f.id() && d.config() == config => {
                    log::info!("reusing distance cache {}", path.display());
                    return Ok(d);
                }
                Ok(_) => log::info!("distance cache {} does not match; recomputing", path.display()),
                Err(e) => log::warn!("ignoring unreadable distance cache {}: {e}", path.display()),
            }
        }
    }
    let cb = |done: usize, total: usize| report(opts.progress, Stage::Distances, done as f64 / total as f64);
    let d = fisher_metric::distance_matrix(data, f, config, opts.parallelism, Some(&cb))?;
    if let Some(path) = opts.cache {
        d.save(path)?;
    }
    Ok(d)
}

/// Kernel `a` for the inverse map: the configured value, or a fit with `b = 1`.
pub fn inverse_kernel_a(config: &PipelineConfig) -> Result<f64> {
    match config.inverse.a {
        Some(a) => Ok(a),
        None => Ok(embedding::fit_ab(config.umap.min_dist, config.umap.spread, true)?.0),
    }
}

/// Kernel widths for the inverse map.
pub fn kernel_widths(source: SigmaSource, emb: &EmbeddingModel, dist: &DistanceMatrix) -> Vec<f64> {
    match source {
        SigmaSource::Perplexity => inverse_map::perplexity_sigma_hat(
            &emb.graph.sigma,
            &emb.graph.neighbors,
            |i, j| dist.get(i, j).powi(2),
            &emb.coords,
        ),
        SigmaSource::Constant => inverse_map::constant_sigma_hat(&emb.coords),
    }
}

fn settings(config: &PipelineConfig, a: f64) -> TrainSettings {
    TrainSettings {
        a,
        b: config.inverse.b,
        momentum: config.inverse.momentum,
        warmup_iters: config.inverse.warmup_iters,
        max_iters: config.inverse.max_iters,
        tol_factor: config.inverse.tol_factor,
    }
}

/// Trains the inverse map on the pairs with indices `idx`.
pub fn train_inverse_on(
    data: &Dataset,
    f: &ClassifierHandle,
    coords: &Matrix,
    sigma_hat: &[f64],
    config: &PipelineConfig,
    a: f64,
    idx: &[usize],
) -> Result<(InverseMapModel, TrainingReport)> {
    let sub = data.subset(idx);
    let metrics = inverse_map::local_metrics(&sub, f, config.inverse.metric)?;
    let sig: Vec<f64> = idx.iter().map(|&i| sigma_hat[i]).collect();
    inverse_map::train(sub.points(), &coords.select_rows(idx), &sig, &metrics, &settings(config, a))
}

fn viewport(coords: &Matrix, margin: f64) -> [f64; 4] {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in coords.iter_rows() {
        for d in 0..2 {
            lo[d] = lo[d].min(r[d]);
            hi[d] = hi[d].max(r[d]);
        }
    }
    let mut vp = [0.0; 4];
    for d in 0..2 {
        let extent = hi[d] - lo[d];
        let pad = if extent > 0.0 { margin * extent } else { margin.max(0.5) };
        vp[2 * d] = lo[d] - pad;
        vp[2 * d + 1] = hi[d] + pad;
    }
    vp
}

/// Runs the full pipeline.
pub fn run(
    data: &Dataset,
    f: &ClassifierHandle,
    config: &PipelineConfig,
    opts: RunOptions<'_>,
) -> Result<PipelineOutput> {
    config.validate()?;
    if data.dim() != f.input_dim() {
        return Err(Error::Dimension {
            expected: f.input_dim(),
            actual: data.dim(),
        });
    }
    if let Some(labels) = data.labels() {
        if let Some(&l) = labels.iter().find(|&&l| l >= f.class_count()) {
            return Err(Error::Data(format!("label {l} exceeds the classifier's {} classes", f.class_count())));
        }
    }
    with_pool(opts.parallelism, || run_inner(data, f, config, &opts))?
}

fn run_inner(
    data: &Dataset,
    f: &ClassifierHandle,
    config: &PipelineConfig,
    opts: &RunOptions<'_>,
) -> Result<PipelineOutput> {
    let n = data.len();
    if n <= config.quality.k {
        return Err(Error::param(format!("need more than {} points", config.quality.k)));
    }
    report(opts.progress, Stage::Distances, 0.0);
    let dist = cached_distances(data, f, &config.metric, opts)?;

    report(opts.progress, Stage::Embedding, 0.0);
    let emb = embedding::project(&dist, &config.umap)?;
    report(opts.progress, Stage::Embedding, 1.0);

    report(opts.progress, Stage::Inverse, 0.0);
    let a = inverse_kernel_a(config)?;
    let sigma_hat = kernel_widths(config.inverse.sigma, &emb, &dist);
    let all: Vec<usize> = (0..n).collect();
    let (model, training) = train_inverse_on(data, f, &emb.coords, &sigma_hat, config, a, &all)?;
    let inverse = match &config.accel {
        None => Inverse::Global(model),
        Some(p) => {
            let tri = delaunay::build(
                &emb.coords,
                p.landmarks(n),
                p.n_k.min(n),
                p.epsilon(&emb.coords),
                p.seed,
            )?;
            Inverse::Local(Box::new(LocalInverse::new(model, tri)?))
        }
    };
    report(opts.progress, Stage::Inverse, 1.0);

    let vp = viewport(&emb.coords, config.grid.margin_fraction);
    let res = [config.grid.width, config.grid.height];
    let done = AtomicUsize::new(0);
    let rows: Vec<Result<Vec<Probe>>> = (0..res[1])
        .into_par_iter()
        .map(|row| {
            let ys: Vec<[f64; 2]> = (0..res[0]).map(|c| cell_center(vp, res, c, row)).collect();
            let out = classify_rows(f, inverse.evaluate_row(&ys));
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            report(opts.progress, Stage::Grid, k as f64 / res[1] as f64);
            out
        })
        .collect();
    let mut grid_labels = Vec::with_capacity(res[1]);
    let mut grid_entropy = Vec::with_capacity(res[1]);
    for row in rows {
        let row = row?;
        grid_labels.push(row.iter().map(|p| p.label).collect());
        grid_entropy.push(row.iter().map(|p| p.entropy).collect());
    }

    report(opts.progress, Stage::Quality, 0.0);
    let predicted = evaluation::model_labels(f, data.points())?;
    let quality = quality_report(data, f, config, &emb, &sigma_hat, a, &inverse, &predicted)?;
    report(opts.progress, Stage::Quality, 1.0);

    let truth = data.labels();
    let scatter = (0..n)
        .map(|i| {
            let p = emb.point(i);
            ScatterPoint(p[0], p[1], predicted[i], truth.map(|t| t[i]))
        })
        .collect();
    let map = DecisionMap {
        viewport: vp,
        resolution: res,
        classes: f.class_count(),
        grid_labels,
        grid_entropy,
        scatter,
        quality,
        params: *config,
        classifier_id: f.id().to_owned(),
    };
    Ok(PipelineOutput {
        map,
        inverse,
        embedding: emb,
        distances: dist,
        sigma_hat,
        training,
    })
}

#[allow(clippy::too_many_arguments)]
fn quality_report(
    data: &Dataset,
    f: &ClassifierHandle,
    config: &PipelineConfig,
    emb: &EmbeddingModel,
    sigma_hat: &[f64],
    a: f64,
    inverse: &Inverse,
    predicted: &[usize],
) -> Result<QualityReport> {
    let q = &config.quality;
    let knn_labels = match (q.ground_truth_labels, data.labels()) {
        (true, Some(l)) => l,
        (true, None) => return Err(Error::param("ground-truth kNN scoring needs labels")),
        (false, _) => predicted,
    };
    let q_knn = evaluation::q_knn(&emb.coords, knn_labels, q.k)?;
    let q_knn_eucl = if q.euclidean_baseline {
        let eu = fisher_metric::euclidean_distance_matrix(data);
        let e = embedding::project(&eu, &config.umap)?;
        Some(evaluation::q_knn(&e.coords, knn_labels, q.k)?)
    } else {
        None
    };
    let q_d = evaluation::accordance(data.points(), &emb.coords, |y| inverse.evaluate(y), f)?;
    let q_nd = evaluation::q_nd(data.points(), &emb.coords, q.split_fraction, q.seed, f, |idx| {
        train_inverse_on(data, f, &emb.coords, sigma_hat, config, a, idx).map(|(m, _)| m)
    })?;
    Ok(QualityReport {
        q_knn,
        q_knn_eucl,
        q_d,
        q_nd,
        k: q.k,
        split_fraction: q.split_fraction,
        seed: q.seed,
    })
}
