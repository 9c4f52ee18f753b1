//! Joint air-quality and weather forecasting over a heterogeneous sensor
//! network.
//!
//! The generator is a recurrent graph network over a typed station graph:
//! per-kind embeddings, context-aware attention over four edge relations,
//! and per-kind GRU cells in an encoder-decoder rollout. Three discriminators
//! (spatial, temporal, city-wide) regularize it adversarially, with their
//! losses re-weighted every iteration by how easily each one separates real
//! from predicted sequences.

pub mod adversarial;
pub mod data;
pub mod error;
pub mod geo;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
