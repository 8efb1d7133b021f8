//! Semantic IDs: compact, content-derived item identifiers for recommender
//! ranking models.
//!
//! The pipeline has two stages. A residual-quantized autoencoder ([`rqvae`])
//! is trained on item content embeddings and then frozen; its per-level code
//! indices become each item's Semantic ID ([`semantic_id`]). A ranking model
//! ([`ranking`]) then represents items through embedding tables addressed by
//! n-grams of those IDs instead of randomly hashed item IDs.
//!
//! [`corpus`] supplies a synthetic corpus with a planted concept hierarchy and
//! a click log whose labels depend on content similarity.

mod codec;
pub mod corpus;
pub mod error;
pub mod nn;
pub mod ranking;
pub mod rqvae;
pub mod semantic_id;
pub mod stats;

pub use error::{Error, Result};
