//! Cross-modal image-text matching built from first principles.
//!
//! The crate trains a shared-embedding matching model (patch-attention image
//! encoder, transformer text encoder) with SGD on an MSE objective, learns a
//! multiple-kernel SVM re-scoring head with an SMO dual solver, and evaluates
//! retrieval quality with Recall, Precision, mAP, and Recall@K over a
//! synthetic paired dataset it can generate itself. Everything is seeded and
//! deterministic; every backward pass is audited against central finite
//! differences.

pub mod attention;
pub mod audit;
pub mod cli;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod mkl;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
