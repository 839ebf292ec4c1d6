//! Retrieval-augmented prosody conditioning for expressive speech synthesis.
//!
//! - [`store`]: the exemplar database and its on-disk format ([`blob`]).
//! - [`retrieval`]: cosine top-K search with pooled semantic queries.
//! - [`prosody`]: WAV input, energy, F0 and mel-cepstral frame features.
//! - [`fusion`]: cross-attention, exemplar conditioning and a LoRA layer,
//!   with analytic gradients.
//! - [`eval`]: MCD, detection metrics and corpus splitting.

pub mod blob;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod numerics;
pub mod prosody;
pub mod retrieval;
pub mod store;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
