//! A desk-scale laboratory for semantic-ID recommendation.
//!
//! Items are tokenized into fixed-length semantic IDs by residual k-means,
//! valid sequences live in a prefix trie, and a small trainable sequence
//! encoder exposes three read-out regimes over one shared trunk:
//!
//! * autoregressive next-token logits, decoded by trie-constrained beam
//!   search (with an exhaustive exact-search oracle),
//! * parallel per-level marginal logits, decoded by marginal products, and
//! * a final hidden state scored against aggregated item embeddings
//!   (similarity retrieval).
//!
//! The [`analysis`] module measures how much beam pruning and marginal
//! factorization distort the induced item distributions, and [`metrics`]
//! provides the leave-one-out evaluation harness shared by all three
//! paradigms.
//!
//! All numeric kernels are generic over [`Scalar`] (`f32` or `f64`);
//! the concrete aliases below fix the default double-precision lane.

pub mod analysis;
pub mod data;
pub mod decoding;
pub mod error;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod simgr;
pub mod tokenizer;

pub use error::{Error, Result};
pub use mat::Mat;
pub use scalar::Scalar;

/// Default scalar type for end-to-end runs.
pub type Real = f64;

/// Matrix over the default scalar.
pub type RealMat = Mat<Real>;

/// Item latent vectors over the default scalar.
pub type RealItemVectors = tokenizer::ItemVectors<Real>;

/// Residual codebooks over the default scalar.
pub type RealCodebooks = tokenizer::Codebooks<Real>;

/// Model parameters over the default scalar.
pub type RealModelParams = model::ModelParams<Real>;

/// Ranked decode output over the default scalar.
pub type RealScoredList = decoding::ScoredList<Real>;
