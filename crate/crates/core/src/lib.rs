//! Decision maps for probabilistic classifiers.
//!
//! Data are embedded in 2D with a classifier-aware UMAP-style projection,
//! an inverse projection is trained back into input space, and a regular
//! grid in the plane is pushed through the classifier to paint its decision
//! regions shaded by predictive entropy.

pub mod classifier;
pub mod dataset;
pub mod delaunay;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod fisher_metric;
pub mod inverse_map;
pub mod matrix;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
pub use matrix::Matrix;
