//! Déjà vu memorization measurement for image and vision-language
//! representation models, computed from precomputed embeddings and
//! object annotations.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod knn;
pub mod reference;
pub mod report;
pub mod synth;
pub mod vision;
pub mod vlm;

pub use error::{Error, Result};
