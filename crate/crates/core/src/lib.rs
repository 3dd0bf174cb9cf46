//! Image memorability regression: datasets, preprocessing pipelines,
//! scoring architectures, training, evaluation and feature visualization.

pub mod datasets;
pub mod eval;
pub mod featurevis;
pub mod image;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod scoring;
pub mod training;
