//! Two-dimensional contrastive embeddings of image datasets.

pub mod augment;
pub mod baselines;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod objective;
pub mod report;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
