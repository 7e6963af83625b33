mod common;

use dmap_core::classifier::train_softmax;
use dmap_core::dataset::{BlobSpec, Dataset};
use dmap_core::fisher_metric::{
    distance_matrix, euclidean_distance_matrix, fisher_arc, fisher_distance, js_divergence, js_sqrt_distance,
    kl_divergence, DistanceMatrix, Divergence, FisherMetricConfig,
};
use dmap_core::Matrix;
use proptest::prelude::*;
use rand::Rng;

const LN2: f64 = std::f64::consts::LN_2;

#[test]
fn js_reference_values() {
    let kl = kl_divergence(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
    assert!((kl - 0.130_812_035_941_136_96).abs() < 1e-15);
    assert!((js_sqrt_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN2.sqrt()).abs() < 1e-9);
    assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    assert!(js_divergence(&[0.5, 0.5], &[0.5]).is_err());
}

#[test]
fn js_symmetry_bounds_and_triangle() {
    let mut r = common::rng(17);
    for c in [2, 5, 10] {
        for _ in 0..1000 {
            let p = common::random_simplex(&mut r, c);
            let q = common::random_simplex(&mut r, c);
            let s = common::random_simplex(&mut r, c);
            let pq = js_divergence(&p, &q).unwrap();
            assert_eq!(pq, js_divergence(&q, &p).unwrap());
            assert!((0.0..=LN2 + 1e-12).contains(&pq));
            let (a, b, d) = (
                js_sqrt_distance(&p, &q).unwrap(),
                js_sqrt_distance(&q, &s).unwrap(),
                js_sqrt_distance(&p, &s).unwrap(),
            );
            assert!(d <= a + b + 1e-12);
        }
    }
}

fn blobs_and_model() -> (Dataset, dmap_core::classifier::ClassifierHandle) {
    let data = BlobSpec { per_class: 10, ..BlobSpec::default() }.generate().unwrap();
    let f = train_softmax(&data, 300, 0.5).unwrap();
    (data, f)
}

#[test]
fn refinement_never_shortens_the_path() {
    let (data, f) = blobs_and_model();
    let mut r = common::rng(3);
    for _ in 0..50 {
        let i = r.random_range(0..data.len());
        let j = r.random_range(0..data.len());
        let (x, y) = (data.points().row(i), data.points().row(j));
        let mut n = 1;
        let mut prev = None;
        while n <= 64 {
            let cfg = FisherMetricConfig { n_segments: n, ..Default::default() };
            let d = fisher_distance(x, y, &f, &cfg).unwrap();
            if let Some(p) = prev {
                assert!(p <= d + 1e-12, "n = {n}: {p} > {d}");
            }
            prev = Some(d);
            n *= 2;
        }
    }
}

#[test]
fn lambda_splits_off_exactly() {
    let (data, f) = blobs_and_model();
    for i in 0..10 {
        let (x, y) = (data.points().row(i), data.points().row(29 - i));
        let a0 = fisher_arc(x, y, &f, &FisherMetricConfig { lambda: 0.0, ..Default::default() }).unwrap();
        let a1 = fisher_arc(x, y, &f, &FisherMetricConfig { lambda: 0.7, ..Default::default() }).unwrap();
        let e: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert_eq!(a0.divergence, a1.divergence);
        assert_eq!(a0.regularizer, 0.0);
        assert_eq!(a1.regularizer, 0.7 * e);
    }
}

#[test]
fn matrix_matches_naive_loop_for_any_batching_and_threads() {
    let (data, f) = blobs_and_model();
    let cfg = FisherMetricConfig::default();
    let reference = distance_matrix(&data, &f, &cfg, 1, None).unwrap();
    for i in 0..data.len() {
        for j in 0..data.len() {
            let want = if i == j {
                0.0
            } else {
                let (a, b) = (i.min(j), i.max(j));
                fisher_distance(data.points().row(a), data.points().row(b), &f, &cfg).unwrap()
            };
            assert_eq!(reference.get(i, j), want);
        }
    }
    for (limit, threads) in [(8, 1), (9, 3), (4096, 4)] {
        let g = f.clone().with_batch_limit(limit);
        let m = distance_matrix(&data, &g, &cfg, threads, None).unwrap();
        assert_eq!(m.values(), reference.values());
    }
}

#[test]
fn progress_reaches_the_total() {
    let (data, f) = blobs_and_model();
    let last = std::sync::Mutex::new((0, 0));
    let cb = |done: usize, total: usize| {
        let mut l = last.lock().unwrap();
        if done > l.0 {
            *l = (done, total);
        }
    };
    distance_matrix(&data, &f, &FisherMetricConfig::default(), 2, Some(&cb)).unwrap();
    let n = data.len();
    assert_eq!(*last.lock().unwrap(), (n * (n - 1) / 2, n * (n - 1) / 2));
}

#[test]
fn cache_round_trip_is_exact() {
    let (data, f) = blobs_and_model();
    let m = distance_matrix(&data, &f, &FisherMetricConfig::default(), 0, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    m.save(&path).unwrap();
    let back = DistanceMatrix::load(&path).unwrap();
    assert_eq!(back, m);
    let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    let n = data.len();
    assert_eq!(v["values_lower_triangle"].as_array().unwrap().len(), n * (n - 1) / 2);
    assert_eq!(v["n"], n);
}

#[test]
fn invalid_matrices_are_rejected() {
    let mut asym = Matrix::zeros(2, 2);
    asym.set(0, 1, 1.0);
    assert!(DistanceMatrix::from_values(asym, FisherMetricConfig::default(), "x").is_err());
    assert!(FisherMetricConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    assert!(FisherMetricConfig { n_segments: 0, ..Default::default() }.validate().is_err());
}

#[test]
fn symmetric_kl_option_and_euclidean_baseline() {
    let (data, f) = blobs_and_model();
    let cfg = FisherMetricConfig { divergence: Divergence::SymKl, ..Default::default() };
    let m = distance_matrix(&data, &f, &cfg, 1, None).unwrap();
    assert!(m.values().is_finite());
    let e = euclidean_distance_matrix(&data);
    let d01: f64 = data.points().row(0).iter().zip(data.points().row(1)).map(|(a, b)| (a - b).powi(2)).sum();
    assert!((e.get(0, 1) - d01.sqrt()).abs() < 1e-12);
}

fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-9f64..1.0, c).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn js_is_a_bounded_symmetric_metric(c in 2usize..8, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let p = common::random_simplex(&mut r, c);
        let q = common::random_simplex(&mut r, c);
        let s = common::random_simplex(&mut r, c);
        let d = |a: &[f64], b: &[f64]| js_sqrt_distance(a, b).unwrap();
        prop_assert_eq!(d(&p, &q), d(&q, &p));
        prop_assert!(d(&p, &q) <= LN2.sqrt() + 1e-12);
        prop_assert!(d(&p, &s) <= d(&p, &q) + d(&q, &s) + 1e-12);
        prop_assert!(d(&p, &p) == 0.0);
    }

    #[test]
    fn js_on_strategies(p in simplex(4), q in simplex(4)) {
        let v = js_divergence(&p, &q).unwrap();
        prop_assert!((0.0..=LN2 + 1e-12).contains(&v));
    }

    #[test]
    fn fisher_distance_is_symmetric_up_to_rounding(seed in any::<u64>(), lambda in 0.0f64..2.0) {
        let f = common::random_softmax(3, 4, 2.0, seed);
        let mut r = common::rng(seed ^ 1);
        let x = common::random_vec(&mut r, 3, 3.0);
        let y = common::random_vec(&mut r, 3, 3.0);
        let cfg = FisherMetricConfig { lambda, ..Default::default() };
        let a = fisher_distance(&x, &y, &f, &cfg).unwrap();
        let b = fisher_distance(&y, &x, &f, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        prop_assert!(a >= 0.0);
    }
}
