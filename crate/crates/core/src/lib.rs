//! Vocabulary-defined semantics over exported language-model representations.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`semantic_basis`]: pseudoinvert the LM-head to get one latent vector per
//!    vocabulary token.
//! 2. [`semantic_logits`]: score a representation by its cosine similarity to
//!    those bases instead of multiplying it with the LM-head.
//! 3. [`neural_cluster`]: train a small gated MLP that pulls representations
//!    toward the basis of their ground-truth label.
//! 4. [`metrics`] and [`knn`]: measure accuracy, macro-F1, ARI and
//!    nearest-neighbour behaviour before and after clustering.
//!
//! Input data lives in [`repr_store::ReprBundle`], persisted in the VDSR format.

pub mod error;
pub mod knn;
pub mod matrix;
pub mod metrics;
pub mod neural_cluster;
pub mod projection;
pub mod repr_store;
pub mod semantic_basis;
pub mod semantic_logits;

pub use error::Error;
pub use matrix::Matrix32;
pub use repr_store::{ReprBundle, SynthSpec};
pub use semantic_basis::SemanticBases;
pub use semantic_logits::LogitsMode;

/// Class-id to vocabulary token ids of the class label.
pub type Verbalizer = std::collections::BTreeMap<usize, Vec<usize>>;
