//! Evaluation tooling for person re-identification embeddings.
//!
//! The crate scores probe embeddings against galleries (ROC-AUC, mAP, CMC,
//! TAR@FAR), improves retrieval by excising high-variance principal
//! components fitted on gallery templates, and measures how well linear
//! probes decode non-identity attributes from the same embeddings.

pub mod corpus;
pub mod emb1;
pub mod metrics;
pub mod pca;
pub mod subspace;
pub mod probes;
pub mod synth;
pub mod cli;
