//! Hybrid CT-scan classifier.
//!
//! Three ImageNet-style CNN backbones (VGG16, DenseNet121, MobileNetV2) are
//! used as frozen feature extractors with a small trainable head. Penultimate
//! features from each fine-tuned model are standardized, reduced with PCA to
//! a target explained variance, concatenated, and classified with a
//! soft-margin support-vector classifier. The crate also ships the full
//! evaluation suite (confusion matrix, class-wise and weighted metrics,
//! ROC/AUC) and a resumable run-directory pipeline behind the `hybridct`
//! binary.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod augment;
pub mod backbone;
pub mod callbacks;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod svc;
pub mod synth;
pub mod tensorfile;

pub use error::{Error, Result};
