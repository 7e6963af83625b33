#![allow(dead_code)]

use dmap_core::classifier::{ClassifierHandle, Network};
use dmap_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_softmax(dim: usize, classes: usize, scale: f64, seed: u64) -> ClassifierHandle {
    let mut r = rng(seed);
    let w: Vec<f64> = (0..dim * classes).map(|_| r.random_range(-scale..scale)).collect();
    let b: Vec<f64> = (0..classes).map(|_| r.random_range(-scale..scale)).collect();
    let net = Network::softmax_linear(Matrix::from_vec(classes, dim, w).unwrap(), b).unwrap();
    ClassifierHandle::from_network(net)
}

pub fn constant_classifier(dim: usize, classes: usize) -> ClassifierHandle {
    ClassifierHandle::from_network(Network::zeros(dim, classes))
}

pub fn random_simplex(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..c).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

pub fn random_vec(r: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-scale..scale)).collect()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, random_vec(r, rows * cols, scale)).unwrap()
}
pub mod oracles;

/// Small labelled blobs with a fitted softmax model.
pub fn blobs_fixture(per_class: usize, seed: u64) -> (dmap_core::dataset::Dataset, ClassifierHandle) {
    let spec = dmap_core::dataset::BlobSpec {
        per_class,
        seed,
        ..Default::default()
    };
    let data = spec.generate().unwrap();
    let f = dmap_core::classifier::train_softmax(&data, 300, 0.5).unwrap();
    (data, f)
}

/// Reduced pipeline settings for fast tests.
pub fn quick_config(grid: usize) -> dmap_core::pipeline::PipelineConfig {
    let mut c = dmap_core::pipeline::PipelineConfig::default();
    c.umap.epochs = 200;
    c.grid.width = grid;
    c.grid.height = grid;
    c
}
