//! Orientation and in-circle predicates with exact fallback.
//!
//! A floating-point evaluation is accepted when it clears a forward error
//! bound; otherwise the determinant is recomputed exactly with
//! nonoverlapping floating-point expansions.

const EPS: f64 = f64::EPSILON * 0.5;
const CCW_BOUND: f64 = (3.0 + 16.0 * EPS) * EPS;
const ICC_BOUND: f64 = (10.0 + 96.0 * EPS) * EPS;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let x = a + b;
    let bv = x - a;
    let av = x - bv;
    (x, (a - av) + (b - bv))
}

#[inline]
fn two_product(a: f64, b: f64) -> (f64, f64) {
    let x = a * b;
    (x, a.mul_add(b, -x))
}

/// Nonoverlapping expansion, components ordered by increasing magnitude,
/// zero components removed.
#[derive(Debug, Clone)]
struct Expansion(Vec<f64>);

impl Expansion {

    fn diff(a: f64, b: f64) -> Self {
        let (x, y) = two_sum(a, -b);
        let mut e = Vec::with_capacity(2);
        if y != 0.0 {
            e.push(y);
        }
        if x != 0.0 {
            e.push(x);
        }
        Expansion(e)
    }

    fn grow(&self, b: f64) -> Self {
        let mut out = Vec::with_capacity(self.0.len() + 1);
        let mut q = b;
        for &e in &self.0 {
            let (sum, err) = two_sum(q, e);
            if err != 0.0 {
                out.push(err);
            }
            q = sum;
        }
        if q != 0.0 {
            out.push(q);
        }
        Expansion(out)
    }

    fn add(&self, other: &Expansion) -> Self {
        other.0.iter().fold(self.clone(), |acc, &c| acc.grow(c))
    }

    fn neg(&self) -> Self {
        Expansion(self.0.iter().map(|v| -v).collect())
    }

    fn sub(&self, other: &Expansion) -> Self {
        self.add(&other.neg())
    }

    fn scale(&self, b: f64) -> Self {
        let mut acc = Expansion(Vec::new());
        for &e in &self.0 {
            let (hi, lo) = two_product(e, b);
            acc = acc.grow(lo).grow(hi);
        }
        acc
    }

    fn mul(&self, other: &Expansion) -> Self {
        other
            .0
            .iter()
            .fold(Expansion(Vec::new()), |acc, &c| acc.add(&self.scale(c)))
    }

    fn sign(&self) -> f64 {
        self.0.last().map_or(0.0, |v| v.signum())
    }
}

fn orient_exact(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let acx = Expansion::diff(a[0], c[0]);
    let bcy = Expansion::diff(b[1], c[1]);
    let acy = Expansion::diff(a[1], c[1]);
    let bcx = Expansion::diff(b[0], c[0]);
    acx.mul(&bcy).sub(&acy.mul(&bcx)).sign()
}

/// Positive if `a, b, c` turn counter-clockwise, negative if clockwise,
/// zero if collinear. Only the sign is meaningful for near-degenerate input.
pub fn orient2d(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let left = (a[0] - c[0]) * (b[1] - c[1]);
    let right = (a[1] - c[1]) * (b[0] - c[0]);
    let det = left - right;
    let bound = CCW_BOUND * (left.abs() + right.abs());
    if det > bound || -det > bound {
        return det;
    }
    orient_exact(a, b, c)
}

fn incircle_exact(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let adx = Expansion::diff(a[0], d[0]);
    let ady = Expansion::diff(a[1], d[1]);
    let bdx = Expansion::diff(b[0], d[0]);
    let bdy = Expansion::diff(b[1], d[1]);
    let cdx = Expansion::diff(c[0], d[0]);
    let cdy = Expansion::diff(c[1], d[1]);
    let alift = adx.mul(&adx).add(&ady.mul(&ady));
    let blift = bdx.mul(&bdx).add(&bdy.mul(&bdy));
    let clift = cdx.mul(&cdx).add(&cdy.mul(&cdy));
    let bc = bdx.mul(&cdy).sub(&cdx.mul(&bdy));
    let ca = cdx.mul(&ady).sub(&adx.mul(&cdy));
    let ab = adx.mul(&bdy).sub(&bdx.mul(&ady));
    alift
        .mul(&bc)
        .add(&blift.mul(&ca))
        .add(&clift.mul(&ab))
        .sign()
}

/// Positive if `d` lies strictly inside the circle through the
/// counter-clockwise triangle `a, b, c`, negative outside, zero on it.
pub fn incircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let bdxcdy = bdx * cdy;
    let cdxbdy = cdx * bdy;
    let alift = adx * adx + ady * ady;
    let cdxady = cdx * ady;
    let adxcdy = adx * cdy;
    let blift = bdx * bdx + bdy * bdy;
    let adxbdy = adx * bdy;
    let bdxady = bdx * ady;
    let clift = cdx * cdx + cdy * cdy;
    let det = alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy) + clift * (adxbdy - bdxady);
    let permanent = (bdxcdy.abs() + cdxbdy.abs()) * alift
        + (cdxady.abs() + adxcdy.abs()) * blift
        + (adxbdy.abs() + bdxady.abs()) * clift;
    let bound = ICC_BOUND * permanent;
    if det > bound || -det > bound {
        return det;
    }
    incircle_exact(a, b, c, d)
}
