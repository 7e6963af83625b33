//! Labelled point sets, CSV persistence and seeded synthetic generators.
//!
//! CSV layout: a header row, one float column per feature, and an optional
//! final integer column named `label`. A sidecar `<file>.json` holding
//! `{"image_shape":[h,w,channels]}` marks rows as flattened images.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Matrix,
    labels: Option<Vec<usize>>,
    feature_names: Option<Vec<String>>,
    image_shape: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Sidecar {
    image_shape: [usize; 3],
}

impl Dataset {
    pub fn new(points: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(Error::Data("dataset needs n >= 1 points and D >= 1 features".into()));
        }
        if !points.is_finite() {
            return Err(Error::Data("dataset contains NaN or infinite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != points.rows() {
                return Err(Error::Dimension {
                    expected: points.rows(),
                    actual: l.len(),
                });
            }
        }
        Ok(Dataset {
            points,
            labels,
            feature_names: None,
            image_shape: None,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: names.len(),
            });
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn with_image_shape(mut self, shape: [usize; 3]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.dim() {
            return Err(Error::Data(format!(
                "image shape {shape:?} does not match {} features",
                self.dim()
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Checks that every label is below `class_count`.
    pub fn check_labels(&self, class_count: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&c| c >= class_count) {
                return Err(Error::Data(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        Ok(())
    }

    /// Number of classes implied by the labels (max label + 1).
    pub fn label_class_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
            image_shape: self.image_shape,
        }
    }

    /// Appends rows; labels must be supplied iff the dataset is labelled.
    pub fn append(&mut self, rows: &Matrix, labels: Option<&[usize]>) -> Result<()> {
        if rows.cols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: rows.cols(),
            });
        }
        match (&mut self.labels, labels) {
            (Some(own), Some(new)) if new.len() == rows.rows() => own.extend_from_slice(new),
            (None, None) => {}
            _ => return Err(Error::Data("appended labels do not match dataset".into())),
        }
        let mut data = self.points.as_slice().to_vec();
        data.extend_from_slice(rows.as_slice());
        self.points = Matrix::from_vec(self.len() + rows.rows(), self.dim(), data)?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let has_label = headers.last().is_some_and(|h| h.trim() == "label");
        let n_features = headers.len() - usize::from(has_label);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut rows = 0;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(Error::Data(format!(
                    "row {} has {} fields, expected {}",
                    line + 2,
                    record.len(),
                    headers.len()
                )));
            }
            for field in record.iter().take(n_features) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!("row {}: '{field}' is not a number", line + 2))
                })?;
                data.push(v);
            }
            if has_label {
                let field = record.get(n_features).unwrap_or_default().trim();
                let l: usize = field.parse().map_err(|_| {
                    Error::Data(format!("row {}: label '{field}' is not a class index", line + 2))
                })?;
                labels.push(l);
            }
            rows += 1;
        }
        let points = Matrix::from_vec(rows, n_features, data)?;
        let mut ds = Dataset::new(points, has_label.then_some(labels))?
            .with_feature_names(headers[..n_features].to_vec())?;
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let meta: Sidecar = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
            ds = ds.with_image_shape(meta.image_shape)?;
        }
        Ok(ds)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = match &self.feature_names {
            Some(n) => n.clone(),
            None => (0..self.dim()).map(|d| format!("x{d}")).collect(),
        };
        if self.labels.is_some() {
            header.push("label".into());
        }
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.points.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        if let Some(shape) = self.image_shape {
            fs::write(
                sidecar_path(path),
                serde_json::to_string(&Sidecar { image_shape: shape })?,
            )?;
        }
        Ok(())
    }
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Gaussian class blobs whose class structure lives in the first
/// `informative` coordinates; the remaining coordinates are isotropic noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub informative: usize,
    /// Distance of every class center from the origin (informative subspace).
    pub center_radius: f64,
    pub cluster_std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 3,
            per_class: 50,
            dim: 10,
            informative: 2,
            center_radius: 4.0,
            cluster_std: 1.0,
            noise_std: 3.0,
            seed: 7,
        }
    }
}

impl BlobSpec {
    /// Class centers placed evenly on a circle in the first two informative axes.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|c| {
                let mut center = vec![0.0; self.dim];
                let angle = std::f64::consts::TAU * c as f64 / self.classes as f64;
                center[0] = self.center_radius * angle.cos();
                if self.informative > 1 && self.dim > 1 {
                    center[1] = self.center_radius * angle.sin();
                }
                center
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 1 || self.per_class < 1 || self.dim < 1 || self.informative > self.dim {
            return Err(Error::param("invalid blob specification"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let signal = Normal::new(0.0, self.cluster_std).map_err(|e| Error::param(e.to_string()))?;
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::param(e.to_string()))?;
        let centers = self.centers();
        let n = self.classes * self.per_class;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        // interleave classes so any prefix is roughly balanced
        for i in 0..self.per_class * self.classes {
            let c = i % self.classes;
            for (d, &mu) in centers[c].iter().enumerate() {
                let e = if d < self.informative {
                    signal.sample(&mut rng)
                } else {
                    noise.sample(&mut rng)
                };
                data.push(mu + e);
            }
            labels.push(c);
        }
        Dataset::new(Matrix::from_vec(n, self.dim, data)?, Some(labels))
    }
}

/// Four Gaussian clusters at (±1, ±1) labelled by the sign of x·y.
pub fn xor_clusters(per_cluster: usize, std: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
    let corners = [(1.0, 1.0, 0), (-1.0, -1.0, 0), (1.0, -1.0, 1), (-1.0, 1.0, 1)];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_cluster {
        for &(cx, cy, label) in &corners {
            rows.push(vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]);
            labels.push(label);
        }
    }
    Dataset::new(Matrix::from_rows(&rows)?, Some(labels))
}

/// Seeded Fisher–Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
