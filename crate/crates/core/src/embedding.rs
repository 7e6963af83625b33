//! UMAP-style projection of a precomputed distance matrix into the plane.
//!
//! Each point keeps its `k` nearest neighbors with memberships
//! `v_{i|j} = exp(−max(d²_ij − ρ_i, 0) / σ_i)`, where `ρ_i` is the squared
//! distance to the nearest neighbor and `σ_i` is found by bisection so the
//! memberships sum to `log₂ k`. Directed memberships are merged with the
//! sum t-conorm `x ⊥ y = x + y − xy`. The layout maximizes
//! `Σ v log w + (1 − v) log(1 − w)` with `w = (1 + a‖r_i − r_j‖^{2b})⁻¹`
//! by edge sampling with negative sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher_metric::DistanceMatrix;
use crate::matrix::Matrix;

const SIGMA_LO: f64 = 1e-6;
const SIGMA_HI: f64 = 1e3;
const SIGMA_EXPANSIONS: usize = 10;
const BISECTION_STEPS: usize = 64;
const BISECTION_TOL: f64 = 1e-5;
const BISECTION_STOP: f64 = 1e-10;
const NEGATIVE_SAMPLES: usize = 5;
const GRAD_CLIP: f64 = 4.0;
const INIT_STD: f64 = 10.0;

/// Symmetrized fuzzy 1-skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    n: usize,
    /// `(i, j, v_ij)` with `i < j` and `0 < v_ij ≤ 1`, sorted by `(i, j)`.
    pub edges: Vec<(usize, usize, f64)>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub k_neighbors: usize,
    /// Per-point `k` nearest neighbors by input distance.
    pub neighbors: Vec<Vec<usize>>,
    /// Points whose `σ` search ended on a bracket bound.
    pub sigma_at_bound: Vec<usize>,
}

impl FuzzyGraph {
    /// Builds a graph directly from symmetric edge weights.
    pub fn from_edges(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut merged = BTreeMap::new();
        for (i, j, v) in edges {
            if i >= n || j >= n || i == j {
                return Err(Error::param(format!("invalid edge ({i},{j})")));
            }
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(format!("edge weight {v} outside (0,1]")));
            }
            merged.insert((i.min(j), i.max(j)), v);
        }
        Ok(FuzzyGraph {
            n,
            edges: merged.into_iter().map(|((i, j), v)| (i, j, v)).collect(),
            rho: vec![0.0; n],
            sigma: vec![1.0; n],
            k_neighbors: 0,
            neighbors: vec![Vec::new(); n],
            sigma_at_bound: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Dense symmetric membership matrix.
    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.edges {
            m.set(i, j, v);
            m.set(j, i, v);
        }
        m
    }
}

/// Sum t-conorm `x + y − xy`.
#[inline]
pub fn t_conorm(x: f64, y: f64) -> f64 {
    x + y * (1.0 - x)
}

/// Indices of the `k` nearest other points, ties broken by lower index.
pub fn nearest_neighbors(dist: &DistanceMatrix, i: usize, k: usize) -> Vec<usize> {
    let row = dist.row(i);
    let mut others: Vec<usize> = (0..dist.len()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    others.truncate(k);
    others
}

fn membership_sum(sq: &[f64], rho: f64, sigma: f64) -> f64 {
    sq.iter().map(|&d2| (-(d2 - rho).max(0.0) / sigma).exp()).sum()
}

/// Bisection for `σ` so that the memberships of `sq` sum to `target`.
/// Returns `(σ, hit_bound)`.
fn search_sigma(sq: &[f64], rho: f64, target: f64) -> (f64, bool) {
    let mut lo = SIGMA_LO;
    let mut hi = SIGMA_HI;
    if membership_sum(sq, rho, lo) > target + BISECTION_TOL {
        return (lo, true);
    }
    let mut expansions = 0;
    while membership_sum(sq, rho, hi) < target - BISECTION_TOL {
        if expansions == SIGMA_EXPANSIONS {
            return (hi, true);
        }
        hi *= 2.0;
        expansions += 1;
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..BISECTION_STEPS {
        mid = 0.5 * (lo + hi);
        let s = membership_sum(sq, rho, mid);
        if (s - target).abs() < BISECTION_STOP {
            break;
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (mid, false)
}

/// Neighbors, memberships, ρ, σ and whether σ hit a bracket bound.
type PointFit = (Vec<usize>, Vec<f64>, f64, f64, bool);

/// Per-point calibration and t-conorm symmetrization over `k`-NN graphs.
pub fn calibrate(dist: &DistanceMatrix, k: usize) -> Result<FuzzyGraph> {
    let n = dist.len();
    if k < 2 || k >= n {
        return Err(Error::param(format!("k = {k} must satisfy 2 <= k < n = {n}")));
    }
    let target = (k as f64).log2();
    let per_point: Vec<PointFit> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nn = nearest_neighbors(dist, i, k);
            let sq: Vec<f64> = nn.iter().map(|&j| dist.get(i, j).powi(2)).collect();
            // nearest neighbor comes first
            let rho = sq[0];
            let (sigma, at_bound) = search_sigma(&sq, rho, target);
            let v: Vec<f64> = sq
                .iter()
                .map(|&d2| (-(d2 - rho).max(0.0) / sigma).exp())
                .collect();
            (nn, v, rho, sigma, at_bound)
        })
        .collect();

    let mut directed: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut neighbors = Vec::with_capacity(n);
    let mut sigma_at_bound = Vec::new();
    for (i, (nn, v, r, s, at_bound)) in per_point.into_iter().enumerate() {
        for (&j, &vij) in nn.iter().zip(&v) {
            let entry = directed.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
            if i < j {
                entry.0 = vij;
            } else {
                entry.1 = vij;
            }
        }
        if at_bound {
            sigma_at_bound.push(i);
        }
        rho.push(r);
        sigma.push(s);
        neighbors.push(nn);
    }
    if !sigma_at_bound.is_empty() {
        log::warn!(
            "sigma search hit its bracket for {} of {n} points",
            sigma_at_bound.len()
        );
    }
    let edges = directed
        .into_iter()
        .map(|((i, j), (a, b))| (i, j, t_conorm(a, b)))
        .filter(|&(_, _, v)| v > 0.0)
        .collect();
    Ok(FuzzyGraph {
        n,
        edges,
        rho,
        sigma,
        k_neighbors: k,
        neighbors,
        sigma_at_bound,
    })
}

/// Least-squares fit of `(1 + a t^{2b})⁻¹` to the curve that is `1` up to
/// `min_dist` and decays as `exp(−(t − min_dist)/spread)` beyond, sampled
/// at 300 points on `[0, 3·spread]`. With `fix_b` only `a` is fitted and
/// `b = 1`. Levenberg–Marquardt from `(1, 1)`.
pub fn fit_ab(min_dist: f64, spread: f64, fix_b: bool) -> Result<(f64, f64)> {
    if !(min_dist > 0.0 && min_dist < spread && spread.is_finite()) {
        return Err(Error::param("fit_ab requires 0 < min_dist < spread"));
    }
    const SAMPLES: usize = 300;
    const MAX_ITERS: usize = 1000;
    let ts: Vec<f64> = (0..SAMPLES)
        .map(|i| 3.0 * spread * i as f64 / (SAMPLES - 1) as f64)
        .collect();
    let ys: Vec<f64> = ts
        .iter()
        .map(|&t| if t <= min_dist { 1.0 } else { (-(t - min_dist) / spread).exp() })
        .collect();

    let cost = |a: f64, b: f64| -> f64 {
        ts.iter()
            .zip(&ys)
            .map(|(&t, &y)| (1.0 / (1.0 + a * t.powf(2.0 * b)) - y).powi(2))
            .sum()
    };

    let (mut a, mut b) = (1.0_f64, 1.0_f64);
    let mut current = cost(a, b);
    let mut mu = 1e-3;
    for _ in 0..MAX_ITERS {
        // normal equations for (a, b)
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &y) in ts.iter().zip(&ys) {
            let p = if t > 0.0 { t.powf(2.0 * b) } else { 0.0 };
            let denom = 1.0 + a * p;
            let r = 1.0 / denom - y;
            let da = -p / (denom * denom);
            let db = if t > 0.0 { -a * p * 2.0 * t.ln() / (denom * denom) } else { 0.0 };
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        if ga.abs().max(if fix_b { 0.0 } else { gb.abs() }) < 1e-14 {
            return Ok((a, b));
        }
        let (step_a, step_b) = if fix_b {
            (-ga / (jaa * (1.0 + mu)), 0.0)
        } else {
            let m11 = jaa * (1.0 + mu);
            let m22 = jbb * (1.0 + mu);
            let det = m11 * m22 - jab * jab;
            ((-ga * m22 + gb * jab) / det, (-gb * m11 + ga * jab) / det)
        };
        let (na, nb) = (a + step_a, b + step_b);
        let trial = if na > 0.0 && nb > 0.0 { cost(na, nb) } else { f64::INFINITY };
        if trial < current {
            let improvement = current - trial;
            a = na;
            b = nb;
            current = trial;
            mu = (mu / 3.0).max(1e-12);
            if improvement <= 1e-15 * current.max(1e-300)
                || step_a.abs().max(step_b.abs()) < 1e-12 * (a.abs() + b.abs())
            {
                return Ok((a, b));
            }
        } else {
            mu *= 4.0;
            if mu > 1e16 {
                // no descent possible from here: stationary to working precision
                return Ok((a, b));
            }
        }
    }
    Err(Error::Fit(MAX_ITERS))
}

/// Membership `w = (1 + a q^b)⁻¹` for squared distance `q`.
#[inline]
pub fn low_dim_weight(q: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * q.powf(b))
}

/// Cross-entropy contribution `−[v ln w + (1 − v) ln(1 − w)]` of one edge.
pub fn edge_loss(ri: [f64; 2], rj: [f64; 2], v: f64, a: f64, b: f64) -> f64 {
    let q = (ri[0] - rj[0]).powi(2) + (ri[1] - rj[1]).powi(2);
    let w = low_dim_weight(q, a, b);
    let mut loss = 0.0;
    if v > 0.0 {
        loss -= v * w.ln();
    }
    if v < 1.0 {
        loss -= (1.0 - v) * (1.0 - w).ln();
    }
    loss
}

/// Analytic gradient of [`edge_loss`] with respect to `ri`.
pub fn edge_gradient(ri: [f64; 2], rj: [f64; 2], v: f64, a: f64, b: f64) -> [f64; 2] {
    let diff = [ri[0] - rj[0], ri[1] - rj[1]];
    let q = diff[0] * diff[0] + diff[1] * diff[1];
    let w = low_dim_weight(q, a, b);
    let coeff = 2.0 * (v * attractive_coeff(q, a, b, w) - (1.0 - v) * b * w / q);
    [coeff * diff[0], coeff * diff[1]]
}

#[inline]
fn attractive_coeff(q: f64, a: f64, b: f64, w: f64) -> f64 {
    a * b * q.powf(b - 1.0) * w
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

/// 2D layout plus the graph and curve parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub coords: Matrix,
    pub a: f64,
    pub b: f64,
    pub graph: FuzzyGraph,
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub coords: Matrix,
    pub a: f64,
    pub b: f64,
    pub seed: u64,
    pub k: usize,
}

impl EmbeddingModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&EmbeddingFile {
            coords: self.coords.clone(),
            a: self.a,
            b: self.b,
            seed: self.rng_seed,
            k: self.graph.k_neighbors,
        })?)
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords.get(i, 0), self.coords.get(i, 1)]
    }
}

/// Seeded `N(0, 10²)` initial layout.
pub fn random_init(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let data = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    Matrix::from_vec(n, 2, data).expect("sized")
}

/// Edge-sampling optimization. Each epoch visits every directed edge; the
/// attractive move fires with probability `v / max v` and is followed by
/// five repulsive moves against uniformly drawn vertices. The step size
/// decays linearly from 1 towards 0.
pub fn optimize(graph: &FuzzyGraph, a: f64, b: f64, epochs: usize, seed: u64) -> Result<EmbeddingModel> {
    if graph.is_empty() {
        return Err(Error::param("cannot embed an empty graph"));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::param("a and b must be positive"));
    }
    let n = graph.len();
    let mut coords = random_init(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_ed6e);
    let max_v = graph.edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let directed: Vec<(usize, usize, f64)> = graph
        .edges
        .iter()
        .flat_map(|&(i, j, v)| [(i, j, v), (j, i, v)])
        .collect();

    for epoch in 0..epochs {
        let alpha = 1.0 - epoch as f64 / epochs as f64;
        for &(i, j, v) in &directed {
            if rng.random::<f64>() * max_v > v {
                continue;
            }
            let (ri, rj) = (pt(&coords, i), pt(&coords, j));
            let diff = [ri[0] - rj[0], ri[1] - rj[1]];
            let q = diff[0] * diff[0] + diff[1] * diff[1];
            if q > 0.0 {
                let c = -2.0 * attractive_coeff(q, a, b, low_dim_weight(q, a, b));
                for (d, &dd) in diff.iter().enumerate() {
                    let g = clip(c * dd);
                    coords.set(i, d, coords.get(i, d) + alpha * g);
                    coords.set(j, d, coords.get(j, d) - alpha * g);
                }
            }
            for _ in 0..NEGATIVE_SAMPLES {
                let k = rng.random_range(0..n);
                if k == i || k == j {
                    continue;
                }
                let (ri, rk) = (pt(&coords, i), pt(&coords, k));
                let diff = [ri[0] - rk[0], ri[1] - rk[1]];
                let q = diff[0] * diff[0] + diff[1] * diff[1];
                let c = 2.0 * b / ((0.001 + q) * (1.0 + a * q.powf(b)));
                for (d, &dd) in diff.iter().enumerate() {
                    let g = if q > 0.0 { clip(c * dd) } else { GRAD_CLIP };
                    coords.set(i, d, coords.get(i, d) + alpha * g);
                }
            }
        }
    }
    if !coords.is_finite() {
        return Err(Error::Divergence("embedding produced non-finite coordinates".into()));
    }
    Ok(EmbeddingModel {
        coords,
        a,
        b,
        graph: graph.clone(),
        rng_seed: seed,
    })
}

#[inline]
fn pt(m: &Matrix, i: usize) -> [f64; 2] {
    [m.get(i, 0), m.get(i, 1)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UmapParams {
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub min_dist: f64,
    pub spread: f64,
}

impl Default for UmapParams {
    fn default() -> Self {
        UmapParams {
            k: 15,
            epochs: 500,
            seed: 42,
            min_dist: 0.1,
            spread: 1.0,
        }
    }
}

impl UmapParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::param("k must be >= 2"));
        }
        if !(self.min_dist > 0.0 && self.min_dist < self.spread) {
            return Err(Error::param("need 0 < min_dist < spread"));
        }
        Ok(())
    }
}

/// Calibrate, fit the curve and optimize. `k` is capped at `n − 1`.
pub fn project(dist: &DistanceMatrix, params: &UmapParams) -> Result<EmbeddingModel> {
    params.validate()?;
    let n = dist.len();
    if n < 3 {
        return Err(Error::param("projection needs at least three points"));
    }
    let graph = calibrate(dist, params.k.min(n - 1))?;
    let (a, b) = fit_ab(params.min_dist, params.spread, false)?;
    optimize(&graph, a, b, params.epochs, params.seed)
}
