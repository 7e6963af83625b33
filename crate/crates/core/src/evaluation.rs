//! Quality scores for a map and the hyperparameter selection rules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::dataset::shuffled_indices;
use crate::error::{Error, Result};
use crate::fisher_metric::js_sqrt_distance;
use crate::inverse_map::{median, InverseMapModel};
use crate::matrix::{argmax, euclidean, sq_dist, Matrix};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_SPLIT: f64 = 0.7;
/// Allowed absolute drop from the best candidate score.
pub const SELECTION_TOLERANCE: f64 = 0.02;
pub const LAMBDA_GRID: [f64; 8] = [10.0, 5.0, 2.0, 1.0, 0.5, 0.2, 0.1, 0.05];
pub const A_GRID: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub q_knn: f64,
    pub q_knn_eucl: Option<f64>,
    pub q_d: f64,
    pub q_nd: f64,
    pub k: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

/// Leave-one-out kNN accuracy in the plane against `labels`.
///
/// Points are first put in a canonical order by `(x, y, label)`, so the
/// score does not depend on the input order. Within that order, distance
/// ties go to the earlier point and vote ties to the smallest label.
pub fn q_knn(coords: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    let n = coords.rows();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: labels.len(),
        });
    }
    if k == 0 || n <= k {
        return Err(Error::param(format!("q_knn needs n > k (n = {n}, k = {k})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (coords.row(i), coords.row(j));
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(labels[i].cmp(&labels[j]))
    });
    let pts: Vec<[f64; 2]> = order.iter().map(|&i| [coords.get(i, 0), coords.get(i, 1)]).collect();
    let lab: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let classes = lab.iter().max().map_or(1, |m| m + 1);

    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&pts[i], &pts[j]), j))
                .collect();
            others.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, j) in &others[..k] {
                votes[lab[j]] += 1;
            }
            let best = votes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)));
            usize::from(best.map(|(c, _)| c) == Some(lab[i]))
        })
        .sum();
    Ok(hits as f64 / n as f64)
}

/// Predicted labels for every row.
pub fn model_labels(f: &ClassifierHandle, points: &Matrix) -> Result<Vec<usize>> {
    let p = f.predict_batch(points)?;
    Ok(p.iter_rows().map(argmax).collect())
}

/// Fraction of `i` with `argmax f(π⁻¹(r_i)) = argmax f(s_i)`.
pub fn q_d(targets: &Matrix, anchors: &Matrix, model: &InverseMapModel, f: &ClassifierHandle) -> Result<f64> {
    accordance(targets, anchors, |y| model.evaluate(y), f)
}

/// Accordance of `f` on `targets` and on `inverse(anchors)`.
pub fn accordance(
    targets: &Matrix,
    anchors: &Matrix,
    inverse: impl Fn([f64; 2]) -> Vec<f64> + Sync,
    f: &ClassifierHandle,
) -> Result<f64> {
    let n = targets.rows();
    if anchors.rows() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: anchors.rows(),
        });
    }
    if n == 0 {
        return Err(Error::param("accordance over an empty set"));
    }
    let rows: Vec<Vec<f64>> = anchors
        .iter_rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| inverse([r[0], r[1]]))
        .collect();
    let recon = Matrix::from_rows(&rows)?;
    let want = model_labels(f, targets)?;
    let got = model_labels(f, &recon)?;
    let agree = want.iter().zip(&got).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / n as f64)
}

/// Seeded train/held-out split with `round(split · n)` training points.
pub fn split_indices(n: usize, split_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(split_fraction > 0.0 && split_fraction <= 1.0) {
        return Err(Error::param("split fraction must lie in (0, 1]"));
    }
    let n_train = (split_fraction * n as f64).round() as usize;
    if n_train == 0 {
        return Err(Error::param("training split is empty"));
    }
    if n_train >= n {
        return Err(Error::param("held-out split is empty"));
    }
    let idx = shuffled_indices(n, seed);
    Ok((idx[..n_train].to_vec(), idx[n_train..].to_vec()))
}

/// Off-data accordance: `train` fits an inverse map on the training
/// indices, which is then scored on the held-out pairs.
pub fn q_nd(
    targets: &Matrix,
    anchors: &Matrix,
    split_fraction: f64,
    seed: u64,
    f: &ClassifierHandle,
    train: impl FnOnce(&[usize]) -> Result<InverseMapModel>,
) -> Result<f64> {
    let (fit, held) = split_indices(targets.rows(), split_fraction, seed)?;
    let model = train(&fit)?;
    q_d(&targets.select_rows(&held), &anchors.select_rows(&held), &model, f)
}

fn check_candidates(candidates: &[f64]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::param("no candidates"));
    }
    if candidates.iter().any(|c| !c.is_finite()) {
        return Err(Error::param("candidates must be finite"));
    }
    Ok(())
}

fn score_all(candidates: &[f64], score: impl Fn(f64) -> Result<f64> + Sync) -> Result<Vec<f64>> {
    candidates.par_iter().map(|&c| score(c)).collect()
}

/// Largest candidate whose score is within the tolerance of the best.
pub fn select_lambda(candidates: &[f64], q_knn_of: impl Fn(f64) -> Result<f64> + Sync) -> Result<f64> {
    check_candidates(candidates)?;
    let scores = score_all(candidates, q_knn_of)?;
    Ok(pick(candidates, &scores, |a, b| a > b))
}

/// Smallest candidate whose score is within the tolerance of the best.
pub fn select_a(candidates: &[f64], q_d_of: impl Fn(f64) -> Result<f64> + Sync) -> Result<f64> {
    check_candidates(candidates)?;
    let scores = score_all(candidates, q_d_of)?;
    Ok(pick(candidates, &scores, |a, b| a < b))
}

fn pick(candidates: &[f64], scores: &[f64], better: impl Fn(f64, f64) -> bool) -> f64 {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut chosen: Option<f64> = None;
    for (&c, &s) in candidates.iter().zip(scores) {
        if s >= best - SELECTION_TOLERANCE - 1e-12 && chosen.is_none_or(|cur| better(c, cur)) {
            chosen = Some(c);
        }
    }
    chosen.expect("at least one candidate attains the best score")
}

/// `median √JS(f(x_i), f(x_j)) / median ‖x_i − x_j‖` over all pairs.
pub fn lambda_scale(points: &Matrix, f: &ClassifierHandle) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::param("lambda scale needs two points"));
    }
    let p = f.predict_batch(points)?;
    let mut js = Vec::with_capacity(n * (n - 1) / 2);
    let mut eu = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            js.push(js_sqrt_distance(p.row(i), p.row(j))?);
            eu.push(euclidean(points.row(i), points.row(j)));
        }
    }
    let (mj, me) = (median(&mut js), median(&mut eu));
    Ok(if mj > 0.0 && me > 0.0 { mj / me } else { 1.0 })
}

/// Default λ candidates, descending.
pub fn lambda_candidates(scale: f64) -> Vec<f64> {
    LAMBDA_GRID.iter().map(|l| l * scale).collect()
}
