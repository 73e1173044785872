//! Command-line tools and the HTTP retrieval service for the visual-name
//! memory.

pub mod cli;
pub mod encoder;
pub mod features;
pub mod service;
pub mod wire;
