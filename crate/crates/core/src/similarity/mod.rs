//! Distribution-level similarity between real and synthetic datasets.

mod embed;
mod mmd;
mod two_sample;

pub use embed::{export_embeddings, EmbeddingMode, Pca};
pub use mmd::{flatten, median_distance, mmd_rbf, mmd_rbf_vectors, MmdResult};
pub use two_sample::{two_sample_predictions, two_sample_score, TwoSamplePredictions, TwoSampleResult, MIN_PER_SIDE};
