//! Retrieval-augmented captioning with an external visual-name memory.
//!
//! - [`memory`]: the exact key/value store of pooled object embeddings and names.
//! - [`retrieval`]: per-query best key, name de-duplication and top-K.
//! - [`fusion`]: a frozen cross-attention stack whose trainable query tokens
//!   read the retrieved names.
//! - [`captioner`]: projection into a frozen decoder, training of the three
//!   trainable parameter groups, and beam-search decoding.

mod binio;
pub mod captioner;
pub mod error;
pub mod fusion;
pub mod memory;
pub mod nn;
pub mod par;
pub mod retrieval;
pub mod vecmath;

pub use binio::fnv1a64;
pub use error::{Error, Result};
pub use memory::{MemoryRecord, MemoryStats, Source, VisualNameMemory};
pub use retrieval::{retrieve_names, RetrievalConfig, RetrievalResult};
pub use vecmath::{Embedding, FeatureBlock};
