//! Independent reference implementations used by several test targets.

use std::collections::{HashMap, HashSet};

use dmap_core::delaunay::{incircle, orient2d};
use dmap_core::inverse_map::{InverseMapModel, LocalMetric};
use dmap_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Sweep triangulation followed by Lawson edge flips.
pub fn lawson_edges(pts: &[[f64; 2]]) -> HashSet<(usize, usize)> {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]).then(pts[a][1].total_cmp(&pts[b][1])));
    let (a, b, c) = (order[0], order[1], order[2]);
    let mut tris: Vec<[usize; 3]> = vec![if orient2d(pts[a], pts[b], pts[c]) > 0.0 { [a, b, c] } else { [a, c, b] }];
    for &p in &order[3..] {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &tris {
            for k in 0..3 {
                let (u, v) = (t[k], t[(k + 1) % 3]);
                *count.entry((u.min(v), u.max(v))).or_default() += 1;
            }
        }
        let mut new = Vec::new();
        for t in &tris {
            for k in 0..3 {
                let (u, v) = (t[k], t[(k + 1) % 3]);
                if count[&(u.min(v), u.max(v))] == 1 && orient2d(pts[u], pts[v], pts[p]) < 0.0 {
                    new.push([v, u, p]);
                }
            }
        }
        tris.extend(new);
    }
    loop {
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, t) in tris.iter().enumerate() {
            for k in 0..3 {
                owner.insert((t[k], t[(k + 1) % 3]), i);
            }
        }
        let mut flipped = false;
        'scan: for i in 0..tris.len() {
            for k in 0..3 {
                let t = tris[i];
                let (a, b, c) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
                if let Some(&j) = owner.get(&(b, a)) {
                    let u = tris[j];
                    let d = *u.iter().find(|&&x| x != a && x != b).unwrap();
                    if incircle(pts[a], pts[b], pts[c], pts[d]) > 0.0 {
                        tris[i] = [a, d, c];
                        tris[j] = [d, b, c];
                        flipped = true;
                        break 'scan;
                    }
                }
            }
        }
        if !flipped {
            break;
        }
    }
    let mut edges = HashSet::new();
    for t in &tris {
        for k in 0..3 {
            let (u, v) = (t[k], t[(k + 1) % 3]);
            edges.insert((u.min(v), u.max(v)));
        }
    }
    edges
}

/// Literal transcription of the composition loop with 1-based row and
/// column counters. A row with no entries left hands the turn on.
pub fn compose_simulation(n: &[Vec<usize>], n_k: usize) -> Option<Vec<usize>> {
    let rows = n.len();
    let mut k = vec![0usize; rows + 1];
    let mut d: HashSet<usize> = HashSet::new();
    let mut c = Vec::new();
    let (mut j, mut i) = (1usize, 1usize);
    let mut idle = 0;
    while j <= n_k {
        if k[i] >= n[i - 1].len() {
            i = (i % rows) + 1;
            idle += 1;
            if idle > rows {
                return None;
            }
            continue;
        }
        idle = 0;
        k[i] += 1;
        let cand = n[i - 1][k[i] - 1];
        if !d.contains(&cand) {
            d.insert(cand);
            c.push(cand);
            i = (i % rows) + 1;
            j += 1;
        }
    }
    Some(c)
}

/// Random fixture: `rows` lists of `len` distinct indices drawn from a
/// small pool so lists collide.
pub fn compose_fixture(r: &mut ChaCha8Rng, rows: usize, len: usize, pool: usize) -> Vec<Vec<usize>> {
    (0..rows)
        .map(|_| {
            let mut row: Vec<usize> = Vec::new();
            while row.len() < len {
                let v = r.random_range(0..pool);
                if !row.contains(&v) {
                    row.push(v);
                }
            }
            row
        })
        .collect()
}

/// Best SSE over plain Lloyd runs from random data points.
pub fn lloyd_best_sse(pts: &[[f64; 2]], k: usize, restarts: usize, r: &mut ChaCha8Rng) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..restarts {
        let mut centers: Vec<[f64; 2]> = Vec::new();
        while centers.len() < k {
            let p = pts[r.random_range(0..pts.len())];
            if !centers.contains(&p) {
                centers.push(p);
            }
        }
        let mut sse = 0.0;
        for _ in 0..200 {
            let mut sum = vec![[0.0, 0.0, 0.0]; k];
            sse = 0.0;
            for p in pts {
                let (c, d) = centers
                    .iter()
                    .enumerate()
                    .map(|(c, q)| (c, (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                sse += d;
                sum[c][0] += p[0];
                sum[c][1] += p[1];
                sum[c][2] += 1.0;
            }
            for (c, s) in centers.iter_mut().zip(&sum) {
                if s[2] > 0.0 {
                    *c = [s[0] / s[2], s[1] / s[2]];
                }
            }
        }
        best = best.min(sse);
    }
    best
}

/// Circumcircle of every simplex free of other vertices, checked with the
/// plain determinant and tolerance 1e-9 relative to the coordinate scale.
pub fn empty_circumcircles(pts: &[[f64; 2]], simplices: &[[usize; 3]]) -> bool {
    simplices.iter().all(|t| {
        let [a, b, c] = t.map(|i| pts[i]);
        let (ux, uy) = circumcenter(a, b, c);
        let r2 = (a[0] - ux).powi(2) + (a[1] - uy).powi(2);
        pts.iter()
            .enumerate()
            .filter(|(i, _)| !t.contains(i))
            .all(|(_, p)| (p[0] - ux).powi(2) + (p[1] - uy).powi(2) >= r2 * (1.0 - 1e-9))
    })
}

fn circumcenter(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> (f64, f64) {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    let n = |p: [f64; 2]| p[0] * p[0] + p[1] * p[1];
    (
        (n(a) * (b[1] - c[1]) + n(b) * (c[1] - a[1]) + n(c) * (a[1] - b[1])) / d,
        (n(a) * (c[0] - b[0]) + n(b) * (a[0] - c[0]) + n(c) * (b[0] - a[0])) / d,
    )
}

pub fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect()
}

pub fn random_spd(r: &mut ChaCha8Rng, d: usize) -> Matrix {
    let b = super::random_matrix(r, d, d, 1.0);
    let mut a = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let v: f64 = (0..d).map(|k| b.get(k, i) * b.get(k, j)).sum();
            a.set(i, j, v + if i == j { 0.5 } else { 0.0 });
        }
    }
    a
}

pub struct Instance {
    pub theta: Matrix,
    pub weights: Vec<Vec<f64>>,
    pub targets: Matrix,
    pub metrics: Vec<LocalMetric>,
}

pub fn instance(r: &mut ChaCha8Rng, n: usize, d: usize) -> Instance {
    let anchors = super::random_matrix(r, n, 2, 3.0);
    let sigma: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
    let theta = super::random_matrix(r, d, n, 2.0);
    let model = InverseMapModel::new(anchors.clone(), theta.clone(), sigma, 1.0, 1.0).unwrap();
    let weights = anchors.iter_rows().map(|y| model.weights([y[0], y[1]])).collect();
    Instance {
        theta,
        weights,
        targets: super::random_matrix(r, n, d, 2.0),
        metrics: (0..n).map(|_| LocalMetric::Dense(random_spd(r, d))).collect(),
    }
}

pub fn shifted(theta: &Matrix, dir: &Matrix, eta: f64) -> Matrix {
    let data = theta.as_slice().iter().zip(dir.as_slice()).map(|(t, v)| t - eta * v).collect();
    Matrix::from_vec(theta.rows(), theta.cols(), data).unwrap()
}

pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Conjugate gradients on `Σ p_i (x − s_i)ᵀ A (x − s_i)` from the origin.
pub fn cg_minimizer(a: &Matrix, p: &[f64], s: &[Vec<f64>]) -> Vec<f64> {
    let d = a.rows();
    let grad = |x: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; d];
        for (pi, si) in p.iter().zip(s) {
            let r: Vec<f64> = x.iter().zip(si).map(|(a, b)| a - b).collect();
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += 2.0 * pi * (0..d).map(|l| a.get(k, l) * r[l]).sum::<f64>();
            }
        }
        g
    };
    let ptot: f64 = p.iter().sum();
    let hess = |v: &[f64]| -> Vec<f64> { (0..d).map(|k| 2.0 * ptot * (0..d).map(|l| a.get(k, l) * v[l]).sum::<f64>()).collect() };
    let mut x = vec![0.0; d];
    let mut r: Vec<f64> = grad(&x).iter().map(|g| -g).collect();
    let mut dir = r.clone();
    for _ in 0..4 * d {
        let rr: f64 = r.iter().map(|v| v * v).sum();
        if rr < 1e-30 {
            break;
        }
        let hd = hess(&dir);
        let alpha = rr / dir.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>();
        x.iter_mut().zip(&dir).for_each(|(xi, di)| *xi += alpha * di);
        r = grad(&x).iter().map(|g| -g).collect();
        let beta = r.iter().map(|v| v * v).sum::<f64>() / rr;
        dir = r.iter().zip(&dir).map(|(ri, di)| ri + beta * di).collect();
    }
    x
}

