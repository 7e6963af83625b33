//! Delaunay neighborhoods for evaluating the inverse map with local anchors.
//!
//! Landmarks are k-means centers of the embedded points plus the corners of
//! a bounding rectangle. Their Delaunay triangulation partitions the plane,
//! and every simplex carries `n_k` data indices composed round-robin from
//! the nearest-neighbor lists of its three vertices.

mod predicates;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use predicates::{incircle, orient2d};

use crate::error::{Error, Result};
use crate::inverse_map::InverseMapModel;
use crate::matrix::{sq_dist, Matrix};

const GHOST: usize = usize::MAX;

/// Planar triangulation with per-simplex neighbor sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triangulation {
    pub vertices: Vec<[f64; 2]>,
    /// Counter-clockwise vertex triples.
    pub simplices: Vec<[usize; 3]>,
    /// `adjacency[s][k]` is the simplex across the edge opposite vertex `k`.
    pub adjacency: Vec<[Option<usize>; 3]>,
    pub neighbor_sets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside(usize),
    Outside,
}

struct Builder<'a> {
    pts: &'a [[f64; 2]],
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
    edges: HashMap<(usize, usize), usize>,
}

impl<'a> Builder<'a> {
    fn add(&mut self, t: [usize; 3]) {
        let id = self.tris.len();
        for k in 0..3 {
            self.edges.insert((t[k], t[(k + 1) % 3]), id);
        }
        self.tris.push(t);
        self.alive.push(true);
    }

    fn remove(&mut self, id: usize) {
        let t = self.tris[id];
        for k in 0..3 {
            self.edges.remove(&(t[k], t[(k + 1) % 3]));
        }
        self.alive[id] = false;
    }

    fn in_conflict(&self, id: usize, p: [f64; 2]) -> bool {
        let t = self.tris[id];
        match t.iter().position(|&v| v == GHOST) {
            None => incircle(self.pts[t[0]], self.pts[t[1]], self.pts[t[2]], p) > 0.0,
            Some(g) => {
                // hull edge u→v with the exterior on its left
                let u = self.pts[t[(g + 1) % 3]];
                let v = self.pts[t[(g + 2) % 3]];
                let o = orient2d(u, v, p);
                if o != 0.0 {
                    return o > 0.0;
                }
                let dot = (p[0] - u[0]) * (v[0] - u[0]) + (p[1] - u[1]) * (v[1] - u[1]);
                let len = (v[0] - u[0]).powi(2) + (v[1] - u[1]).powi(2);
                dot > 0.0 && dot < len
            }
        }
    }

    fn insert(&mut self, pi: usize) {
        let p = self.pts[pi];
        let Some(start) = (0..self.tris.len()).find(|&t| self.alive[t] && self.in_conflict(t, p)) else {
            return;
        };
        let mut cavity = vec![start];
        let mut seen: HashSet<usize> = HashSet::from([start]);
        let mut k = 0;
        while k < cavity.len() {
            let t = self.tris[cavity[k]];
            for e in 0..3 {
                if let Some(&nb) = self.edges.get(&(t[(e + 1) % 3], t[e])) {
                    if !seen.contains(&nb) && self.in_conflict(nb, p) {
                        seen.insert(nb);
                        cavity.push(nb);
                    }
                }
            }
            k += 1;
        }
        let mut boundary = Vec::new();
        for &id in &cavity {
            let t = self.tris[id];
            for e in 0..3 {
                let (u, v) = (t[e], t[(e + 1) % 3]);
                match self.edges.get(&(v, u)) {
                    Some(nb) if seen.contains(nb) => {}
                    _ => boundary.push((u, v)),
                }
            }
        }
        for &id in &cavity {
            self.remove(id);
        }
        for (u, v) in boundary {
            self.add([u, v, pi]);
        }
    }
}

fn lex_cmp(a: &[f64; 2], b: &[f64; 2]) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// Delaunay triangulation by incremental Bowyer–Watson insertion in
/// lexicographic order. The super-triangle is a vertex at infinity: hull
/// edges carry ghost triangles whose "circumcircle" is the open outer half
/// plane. Cocircular points are not in conflict, so ties resolve by the
/// insertion order. Exact duplicates are ignored.
pub fn triangulate(vertices: &[[f64; 2]]) -> Result<Triangulation> {
    if vertices.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
        return Err(Error::DegenerateGeometry("non-finite vertex".into()));
    }
    let mut order: Vec<usize> = (0..vertices.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&vertices[a], &vertices[b]).then(a.cmp(&b)));
    order.dedup_by(|a, b| vertices[*a] == vertices[*b]);
    if order.len() < 3 {
        return Err(Error::DegenerateGeometry("need at least three distinct vertices".into()));
    }
    let (a, b) = (order[0], order[1]);
    let c_pos = (2..order.len())
        .find(|&k| orient2d(vertices[a], vertices[b], vertices[order[k]]) != 0.0)
        .ok_or_else(|| Error::DegenerateGeometry("all vertices are collinear".into()))?;
    let c = order[c_pos];

    let mut builder = Builder {
        pts: vertices,
        tris: Vec::new(),
        alive: Vec::new(),
        edges: HashMap::new(),
    };
    let first = if orient2d(vertices[a], vertices[b], vertices[c]) > 0.0 {
        [a, b, c]
    } else {
        [a, c, b]
    };
    builder.add(first);
    for k in 0..3 {
        builder.add([first[(k + 1) % 3], first[k], GHOST]);
    }
    for (pos, &v) in order.iter().enumerate() {
        if pos < 2 || pos == c_pos {
            continue;
        }
        builder.insert(v);
    }

    let mut simplices: Vec<[usize; 3]> = builder
        .tris
        .iter()
        .zip(&builder.alive)
        .filter(|(t, &alive)| alive && !t.contains(&GHOST))
        .map(|(t, _)| {
            let r = (0..3).min_by_key(|&k| t[k]).expect("three vertices");
            [t[r], t[(r + 1) % 3], t[(r + 2) % 3]]
        })
        .collect();
    simplices.sort_unstable();
    let adjacency = adjacency_of(&simplices);
    Ok(Triangulation {
        vertices: vertices.to_vec(),
        simplices,
        adjacency,
        neighbor_sets: Vec::new(),
    })
}

fn adjacency_of(simplices: &[[usize; 3]]) -> Vec<[Option<usize>; 3]> {
    let mut owner = HashMap::new();
    for (s, t) in simplices.iter().enumerate() {
        for k in 0..3 {
            owner.insert((t[k], t[(k + 1) % 3]), s);
        }
    }
    simplices
        .iter()
        .map(|t| {
            let mut adj = [None; 3];
            for (k, slot) in adj.iter_mut().enumerate() {
                let (u, v) = (t[(k + 1) % 3], t[(k + 2) % 3]);
                *slot = owner.get(&(v, u)).copied();
            }
            adj
        })
        .collect()
}

impl Triangulation {
    pub fn corners(&self, s: usize) -> [[f64; 2]; 3] {
        let t = self.simplices[s];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    /// Undirected edges as sorted vertex pairs.
    pub fn edge_set(&self) -> HashSet<(usize, usize)> {
        let mut set = HashSet::new();
        for t in &self.simplices {
            for k in 0..3 {
                let (u, v) = (t[k], t[(k + 1) % 3]);
                set.insert((u.min(v), u.max(v)));
            }
        }
        set
    }

    /// True if `y` lies in the closed simplex `s`.
    pub fn contains(&self, s: usize, y: [f64; 2]) -> bool {
        let [a, b, c] = self.corners(s);
        orient2d(a, b, y) >= 0.0 && orient2d(b, c, y) >= 0.0 && orient2d(c, a, y) >= 0.0
    }

    /// Barycentric coordinates of `y` with respect to simplex `s`.
    pub fn barycentric(&self, s: usize, y: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.corners(s);
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        let l0 = ((b[0] - y[0]) * (c[1] - y[1]) - (b[1] - y[1]) * (c[0] - y[0])) / area;
        let l1 = ((c[0] - y[0]) * (a[1] - y[1]) - (c[1] - y[1]) * (a[0] - y[0])) / area;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Point location by a visibility walk from `start`; falls back to a
    /// scan if the walk does not settle. Points on shared boundaries go to
    /// the lowest-index containing simplex.
    pub fn locate_from(&self, y: [f64; 2], start: usize) -> Location {
        if self.simplices.is_empty() || !(y[0].is_finite() && y[1].is_finite()) {
            return Location::Outside;
        }
        let mut t = start.min(self.simplices.len() - 1);
        let mut found = None;
        for _ in 0..4 * self.simplices.len() + 8 {
            let [a, b, c] = self.corners(t);
            let edges = [(b, c), (c, a), (a, b)];
            let mut moved = false;
            for (k, (u, v)) in edges.iter().enumerate() {
                if orient2d(*u, *v, y) < 0.0 {
                    match self.adjacency[t][k] {
                        Some(nb) => {
                            t = nb;
                            moved = true;
                            break;
                        }
                        None => return Location::Outside,
                    }
                }
            }
            if !moved {
                found = Some(t);
                break;
            }
        }
        let t = match found {
            Some(t) => t,
            None => match (0..self.simplices.len()).find(|&s| self.contains(s, y)) {
                Some(s) => s,
                None => return Location::Outside,
            },
        };
        let [a, b, c] = self.corners(t);
        let on_boundary = orient2d(a, b, y) == 0.0 || orient2d(b, c, y) == 0.0 || orient2d(c, a, y) == 0.0;
        if on_boundary {
            let lowest = (0..t).find(|&s| self.contains(s, y)).unwrap_or(t);
            return Location::Inside(lowest);
        }
        Location::Inside(t)
    }

    pub fn locate(&self, y: [f64; 2]) -> Location {
        self.locate_from(y, 0)
    }
}

/// Walking point locator that remembers the last simplex it found.
/// Not shared across threads; create one per worker.
pub struct Locator<'a> {
    tri: &'a Triangulation,
    cursor: Cell<usize>,
}

impl<'a> Locator<'a> {
    pub fn new(tri: &'a Triangulation) -> Self {
        Locator {
            tri,
            cursor: Cell::new(0),
        }
    }

    pub fn locate(&self, y: [f64; 2]) -> Location {
        let loc = self.tri.locate_from(y, self.cursor.get());
        if let Location::Inside(s) = loc {
            self.cursor.set(s);
        }
        loc
    }
}

/// Lloyd's algorithm with seeded k-means++ initialization. Stops after 100
/// iterations or once no center moves by 1e-9. An empty cluster is
/// reseeded at the point farthest from its assigned center.
pub fn kmeans2d(points: &Matrix, n_s: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = points.rows();
    if points.cols() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            actual: points.cols(),
        });
    }
    if n_s < 1 || n_s > n {
        return Err(Error::param(format!("n_s = {n_s} must lie in [1, {n}]")));
    }
    let pts: Vec<[f64; 2]> = points.iter_rows().map(|r| [r[0], r[1]]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![pts[first]];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &pts[first])).collect();
    while centers.len() < n_s {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive mass"))
        } else {
            (0..n).find(|&i| !chosen[i]).expect("n_s <= n")
        };
        chosen[pick] = true;
        centers.push(pts[pick]);
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(sq_dist(p, &pts[pick]));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        for (i, p) in pts.iter().enumerate() {
            assign[i] = nearest_center(&centers, p);
        }
        let mut sums = vec![[0.0, 0.0]; n_s];
        let mut counts = vec![0usize; n_s];
        for (p, &c) in pts.iter().zip(&assign) {
            sums[c][0] += p[0];
            sums[c][1] += p[1];
            counts[c] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..n_s {
            let next = if counts[c] > 0 {
                [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64]
            } else {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(&pts[i], &centers[assign[i]]);
                        let dj = sq_dist(&pts[j], &centers[assign[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("non-empty");
                pts[far]
            };
            shift = shift.max(sq_dist(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        if shift < 1e-9 {
            break;
        }
    }
    Ok(centers)
}

fn nearest_center(centers: &[[f64; 2]], p: &[f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Within-cluster sum of squared distances to the nearest center.
pub fn kmeans_sse(points: &Matrix, centers: &[[f64; 2]]) -> f64 {
    points
        .iter_rows()
        .map(|r| {
            let p = [r[0], r[1]];
            sq_dist(&p, &centers[nearest_center(centers, &p)])
        })
        .sum()
}

/// Counter-clockwise corners of the bounding box grown by `epsilon`.
pub fn border(points: &Matrix, epsilon: f64) -> Result<[[f64; 2]; 4]> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("border epsilon must be positive"));
    }
    if points.rows() == 0 {
        return Err(Error::param("border needs at least one point"));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in points.iter_rows() {
        for d in 0..2 {
            lo[d] = lo[d].min(r[d]);
            hi[d] = hi[d].max(r[d]);
        }
    }
    let (x0, y0) = (lo[0] - epsilon, lo[1] - epsilon);
    let (x1, y1) = (hi[0] + epsilon, hi[1] + epsilon);
    Ok([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
}

/// Round-robin merge of per-vertex neighbor lists (each sorted by
/// distance). A row's cursor advances past indices already taken and the
/// row keeps the turn until it contributes; an exhausted row passes its
/// turn to the next one.
pub fn compose_neighbors(rows: &[Vec<usize>], n_k: usize) -> Result<Vec<usize>> {
    let available = rows.iter().flatten().collect::<HashSet<_>>().len();
    if available < n_k {
        return Err(Error::NeighborhoodExhausted {
            available,
            requested: n_k,
        });
    }
    let mut cursors = vec![0usize; rows.len()];
    let mut taken = HashSet::with_capacity(n_k);
    let mut out = Vec::with_capacity(n_k);
    let mut i = 0;
    while out.len() < n_k {
        if cursors[i] >= rows[i].len() {
            i = (i + 1) % rows.len();
            continue;
        }
        let candidate = rows[i][cursors[i]];
        cursors[i] += 1;
        if taken.insert(candidate) {
            out.push(candidate);
            i = (i + 1) % rows.len();
        }
    }
    Ok(out)
}

fn nearest_data(points: &[[f64; 2]], q: [f64; 2], n_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        sq_dist(&points[a], &q)
            .total_cmp(&sq_dist(&points[b], &q))
            .then(a.cmp(&b))
    });
    idx.truncate(n_k);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelaunayParams {
    /// Landmark count; `None` uses `max(8, n/20)` capped at `n`.
    pub n_s: Option<usize>,
    pub n_k: usize,
    /// Border margin as a fraction of the bounding-box diagonal.
    pub epsilon_fraction: f64,
    pub seed: u64,
}

impl Default for DelaunayParams {
    fn default() -> Self {
        DelaunayParams {
            n_s: None,
            n_k: 30,
            epsilon_fraction: 0.05,
            seed: 0,
        }
    }
}

impl DelaunayParams {
    pub fn landmarks(&self, n: usize) -> usize {
        self.n_s.unwrap_or((n / 20).max(8)).clamp(1, n)
    }

    pub fn epsilon(&self, points: &Matrix) -> f64 {
        let b = border(points, 1.0).expect("non-empty");
        let diag = ((b[2][0] - b[0][0] - 2.0).powi(2) + (b[2][1] - b[0][1] - 2.0).powi(2)).sqrt();
        let e = self.epsilon_fraction * diag;
        if e > 0.0 {
            e
        } else {
            self.epsilon_fraction.max(1e-6)
        }
    }
}

/// Landmarks, triangulation and composed neighborhoods for 2D data.
pub fn build(points: &Matrix, n_s: usize, n_k: usize, epsilon: f64, seed: u64) -> Result<Triangulation> {
    let n = points.rows();
    if n_k < 1 || n_k > n {
        return Err(Error::param(format!("n_k = {n_k} must lie in [1, {n}]")));
    }
    let centers = kmeans2d(points, n_s, seed)?;
    let corners = border(points, epsilon)?;
    let mut vertices = centers;
    vertices.extend_from_slice(&corners);
    let mut tri = triangulate(&vertices)?;

    let data: Vec<[f64; 2]> = points.iter_rows().map(|r| [r[0], r[1]]).collect();
    tri.neighbor_sets = tri
        .simplices
        .iter()
        .map(|s| {
            let rows: Vec<Vec<usize>> = s
                .iter()
                .map(|&v| nearest_data(&data, tri.vertices[v], n_k))
                .collect();
            compose_neighbors(&rows, n_k)
        })
        .collect::<Result<_>>()?;

    let locator = Locator::new(&tri);
    for (i, p) in data.iter().enumerate() {
        if locator.locate(*p) == Location::Outside {
            return Err(Error::DegenerateGeometry(format!("data point {i} is not covered")));
        }
    }
    Ok(tri)
}

/// Inverse map restricted to Delaunay neighborhoods. The anchor set of a
/// landmark is the union of the neighbor sets of its incident simplices;
/// a query inside simplex `s` blends the restricted evaluations at the
/// three corners of `s` with its barycentric coordinates. Neighboring
/// simplices share the corner evaluations on their common edge, so the
/// result is continuous. Queries outside the border rectangle take the
/// weights of its nearest point on the rectangle.
#[derive(Debug, Clone)]
pub struct LocalInverse {
    model: InverseMapModel,
    tri: Triangulation,
    vertex_anchors: Vec<Vec<usize>>,
}

impl LocalInverse {
    pub fn new(model: InverseMapModel, tri: Triangulation) -> Result<Self> {
        if tri.neighbor_sets.len() != tri.simplices.len() {
            return Err(Error::param("triangulation lacks neighbor sets"));
        }
        if tri.neighbor_sets.iter().flatten().any(|&i| i >= model.len()) {
            return Err(Error::param("neighbor index outside the anchor set"));
        }
        let mut sets = vec![std::collections::BTreeSet::new(); tri.vertices.len()];
        for (s, t) in tri.simplices.iter().enumerate() {
            for &v in t {
                sets[v].extend(tri.neighbor_sets[s].iter().copied());
            }
        }
        Ok(LocalInverse {
            model,
            vertex_anchors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            tri,
        })
    }

    pub fn model(&self) -> &InverseMapModel {
        &self.model
    }

    pub fn triangulation(&self) -> &Triangulation {
        &self.tri
    }

    pub fn evaluate_with(&self, locator: &Locator<'_>, y: [f64; 2]) -> Vec<f64> {
        // outside the border the weights of the nearest rectangle point are used
        let at = match locator.locate(y) {
            Location::Inside(s) => Some((s, y)),
            Location::Outside => self.hull_point(y).and_then(|c| match locator.locate(c) {
                Location::Inside(s) => Some((s, c)),
                Location::Outside => None,
            }),
        };
        match at {
            None => self.model.evaluate(y),
            Some((s, w)) => {
                let lambda = self.tri.barycentric(s, w).map(|l| l.clamp(0.0, 1.0));
                let mut out = vec![0.0; self.model.dim()];
                for (k, &v) in self.tri.simplices[s].iter().enumerate() {
                    if lambda[k] == 0.0 {
                        continue;
                    }
                    let x = self.model.evaluate_subset(y, &self.vertex_anchors[v]);
                    for (o, xi) in out.iter_mut().zip(&x) {
                        *o += lambda[k] * xi;
                    }
                }
                out
            }
        }
    }

    pub fn evaluate(&self, y: [f64; 2]) -> Vec<f64> {
        self.evaluate_with(&Locator::new(&self.tri), y)
    }

    fn hull_point(&self, y: [f64; 2]) -> Option<[f64; 2]> {
        if !(y[0].is_finite() && y[1].is_finite()) {
            return None;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in &self.tri.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        Some([y[0].clamp(lo[0], hi[0]), y[1].clamp(lo[1], hi[1])])
    }
}
