//! Contrastive alignment of EEG, MEG and fMRI features to a frozen
//! image-embedding space.
//!
//! Each modality gets an encoder `f = g ∘ a` built from a per-subject affine
//! alignment `a` and a shared network `g`. Encoders are trained with a
//! symmetric contrastive loss against precomputed image embeddings, after
//! which decoding, encoding and cross-modality conversion all reduce to exact
//! cosine-similarity retrieval in the shared space.

pub mod contrastive;
pub mod dataset;
pub mod datastore;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod metrics;
pub mod retrieval;
pub mod train;

pub use error::{Error, Result};
