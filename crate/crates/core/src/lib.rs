//! Evidential deep learning for classification with ambiguous labels and
//! for estimating the distribution of annotator labels.
//!
//! The crate covers the full pipeline on precomputed utterance-level
//! features: annotation handling, Dirichlet predictions, evidential and
//! softmax losses, a small feed-forward network with manual backprop,
//! evaluation metrics, a seeded synthetic data generator, and an
//! experiment driver used by the `edl` binary.

pub mod annotations;
pub mod datagen;
pub mod dirichlet;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod special;

pub use annotations::{AnnotationSet, Dataset, DatasetFormat, Example, MajorityOutcome, MajorityStatus};
pub use dirichlet::DirichletPrediction;
pub use error::{EdlError, Result};
pub use losses::{LossKind, LossSpec, LossValueGrad, Target};
